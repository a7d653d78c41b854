"""PFM / PNG / PGM image I/O.

PFM is the lossless float path. PNG (8 or 16 bit) goes through Pillow and is
converted to linear [0, 1] floats, optionally undoing the sRGB transfer
curve (``gamma="srgb"``).
"""

from __future__ import annotations

import io
import re
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError


def read_pfm(path) -> np.ndarray:
    """Return a float64 array (H, W) or (H, W, 3), top row first."""
    data = Path(path).read_bytes()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+(-?[\d.eE+-]+)\s", data)
    if not m:
        raise FormatError(f"{path}: malformed PFM header")
    color = m.group(1) == b"PF"
    width, height = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    endian = "<" if scale < 0 else ">"
    channels = 3 if color else 1
    count = width * height * channels
    body = data[m.end() :]
    if len(body) != 4 * count:
        raise FormatError(f"{path}: expected {4 * count} data bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=endian + "f4").astype(np.float64)
    shape = (height, width, 3) if color else (height, width)
    # PFM stores the bottom row first
    return np.flipud(arr.reshape(shape)).copy()


def pfm_bytes(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim == 2:
        tag = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM supports 1 or 3 channels, got shape {img.shape}")
    h, w = img.shape[:2]
    body = np.ascontiguousarray(np.flipud(img), dtype="<f4").tobytes()
    return tag + f"\n{w} {h}\n-1.0\n".encode() + body


def write_pfm(path, image: np.ndarray) -> None:
    from .ingest import atomic_write_bytes

    atomic_write_bytes(Path(path), pfm_bytes(image))


def srgb_to_linear(v: np.ndarray) -> np.ndarray:
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(v: np.ndarray) -> np.ndarray:
    v = np.clip(v, 0.0, 1.0)
    return np.where(v <= 0.0031308, 12.92 * v, 1.055 * v ** (1 / 2.4) - 0.055)


def read_image(path, gamma: str = "linear", raw: bool = False):
    """Read PFM, PNG or PGM.

    With ``raw=True`` integer formats are returned unscaled together with
    their maximum code value (``None`` for PFM); otherwise a float64 image in
    [0, 1] (PNG/PGM) or as stored (PFM) is returned.
    """
    path = Path(path)
    head = path.read_bytes()[:2]
    if head in (b"PF", b"Pf"):
        img = read_pfm(path)
        return (img, None) if raw else img
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.array(im)
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: unreadable image ({exc})") from None
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        maxval = 65535
    elif mode in ("L", "RGB"):
        maxval = 255
    elif mode == "RGBA":
        arr, maxval = arr[:, :, :3], 255
    else:
        raise FormatError(f"{path}: unsupported image mode {mode}")
    arr = arr.astype(np.float64)
    if raw:
        return arr, maxval
    arr = arr / maxval
    if gamma == "srgb":
        arr = srgb_to_linear(arr)
    elif gamma != "linear":
        raise ValueError(f"unknown gamma mode {gamma!r}")
    return arr


def png_bytes(image: np.ndarray, bits: int = 8, gamma: str = "linear") -> bytes:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if gamma == "srgb":
        img = linear_to_srgb(img)
    elif gamma != "linear":
        raise ValueError(f"unknown gamma mode {gamma!r}")
    if bits == 8:
        pil = Image.fromarray(np.round(img * 255).astype(np.uint8))
    elif bits == 16:
        if img.ndim != 2:
            raise ValueError("16-bit PNG output is single-channel only")
        pil = Image.fromarray(np.round(img * 65535).astype(np.uint16))
    else:
        raise ValueError("bits must be 8 or 16")
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return buf.getvalue()


def write_png(path, image: np.ndarray, bits: int = 8, gamma: str = "linear") -> None:
    from .ingest import atomic_write_bytes

    atomic_write_bytes(Path(path), png_bytes(image, bits, gamma))


def write_pgm16(path, counts: np.ndarray) -> None:
    from .ingest import atomic_write_bytes

    c = np.asarray(counts)
    if c.ndim != 2 or c.min() < 0 or c.max() > 65535:
        raise ValueError("PGM16 needs a 2-D array of counts in [0, 65535]")
    h, w = c.shape
    data = f"P5\n{w} {h}\n65535\n".encode() + c.astype(">u2").tobytes()
    atomic_write_bytes(Path(path), data)


def write_image(path, image: np.ndarray, bits: int = 8, gamma: str = "linear") -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".pfm":
        write_pfm(path, image)
    elif suffix == ".png":
        write_png(path, image, bits, gamma)
    else:
        raise ValueError(f"unsupported output format {suffix!r} (use .pfm or .png)")
