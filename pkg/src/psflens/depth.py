"""Object distance / z-buffer -> per-pixel defocus via the thin-lens equation.

Units: focal length and image distance in mm, object distances in m,
defocus in um. Sign convention: an object nearer than the focus distance
images behind the sensor plane, which is reported as positive defocus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ObjectInsideFocal, ValueOutOfRange

V_CONVENTION = "v=0 at near plane, v=1 at far plane, perspective depth"


@dataclass(frozen=True)
class CameraFocusSpec:
    f: float = 6.0  # mm
    o_focus: float = math.inf  # m
    near: float = 0.1  # m, z-buffer clip planes
    far: float = 1000.0  # m

    def __post_init__(self):
        if not self.f > 0:
            raise ValueError("focal length must be positive")
        if not self.o_focus * 1000.0 > self.f:
            raise ObjectInsideFocal("focus distance must lie beyond the focal length")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")


@dataclass
class DepthMap:
    values: np.ndarray  # object distance in m, inf allowed

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("depth map must be 2-D")
        if np.any(np.isnan(v)) or np.any(v <= 0):
            raise ValueError("depths must be positive (inf allowed)")
        self.values = v

    @property
    def shape(self):
        return self.values.shape


@dataclass
class DefocusMap:
    values: np.ndarray  # um
    clamped: np.ndarray | None = None  # bool, value was outside the model range
    invalid: np.ndarray | None = None  # bool, object inside the focal length

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or not np.all(np.isfinite(v)):
            raise ValueError("defocus map must be a finite 2-D array")
        self.values = v
        if self.clamped is None:
            self.clamped = np.zeros(v.shape, bool)
        if self.invalid is None:
            self.invalid = np.zeros(v.shape, bool)

    @property
    def shape(self):
        return self.values.shape

    @classmethod
    def constant(cls, height: int, width: int, dz: float = 0.0) -> "DefocusMap":
        return cls(np.full((height, width), float(dz)))


def thin_lens_image_distance(f: float, o: float) -> float:
    """Image distance in mm for focal length ``f`` (mm) and object distance ``o`` (m)."""
    o_mm = o * 1000.0
    if not o_mm > f:
        raise ObjectInsideFocal(f"object at {o} m is not beyond the focal length {f} mm")
    if math.isinf(o_mm):
        return float(f)
    return 1.0 / (1.0 / f - 1.0 / o_mm)


def defocus_from_distance(spec: CameraFocusSpec, o: float) -> float:
    if o == spec.o_focus:
        return 0.0
    i = thin_lens_image_distance(spec.f, o)
    i_focus = thin_lens_image_distance(spec.f, spec.o_focus)
    return (i - i_focus) * 1000.0


def linearize_zbuffer(values, near: float, far: float) -> DepthMap:
    """Perspective depth buffer in [0, 1] -> eye-space distance in m."""
    v = np.asarray(values, dtype=np.float64)
    if not 0 < near < far:
        raise ValueError("need 0 < near < far")
    if np.any(~np.isfinite(v)) or np.any(v < 0) or np.any(v > 1):
        raise ValueOutOfRange("z-buffer values must lie in [0, 1]")
    # same as n*fz / (fz - v*(fz - n)) without the cancellation near v = 1
    z = (near * far) / (v * near + (1.0 - v) * far)
    return DepthMap(np.atleast_2d(z))


def encode_zbuffer(z, near: float, far: float) -> np.ndarray:
    """Inverse of :func:`linearize_zbuffer`."""
    z = np.asarray(z, dtype=np.float64)
    return far * (z - near) / (z * (far - near))


def defocus_map(
    spec: CameraFocusSpec, depth: DepthMap, clamp_range: tuple[float, float] = (-50.0, 50.0)
) -> DefocusMap:
    """Per-pixel defocus, clamped to ``clamp_range``.

    Pixels closer than the focal length cannot be imaged; they are flagged
    invalid and set to the upper clamp value instead of aborting the map.
    """
    lo, hi = clamp_range
    o_mm = depth.values * 1000.0
    invalid = ~(o_mm > spec.f)
    i_focus = thin_lens_image_distance(spec.f, spec.o_focus)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_o = np.where(np.isinf(o_mm), 0.0, 1.0 / np.where(invalid, 1.0, o_mm))
        i = 1.0 / (1.0 / spec.f - inv_o)
    dz = np.where(invalid, hi, (i - i_focus) * 1000.0)
    dz = np.where(depth.values == spec.o_focus, 0.0, dz)
    clamped = (dz < lo) | (dz > hi)
    return DefocusMap(np.clip(dz, lo, hi), clamped | invalid, invalid)


def gradient_defocus(width: int, height: int, dz_left: float, dz_right: float) -> DefocusMap:
    """Defocus varying linearly with column index, constant along rows."""
    if width == 1:
        row = np.array([float(dz_left)])
    else:
        t = np.arange(width) / (width - 1)
        row = dz_left + t * (dz_right - dz_left)
        row[0], row[-1] = dz_left, dz_right
    return DefocusMap(np.tile(row, (height, 1)))


# ---------------------------------------------------------------------------
# depth files: PFM / 16-bit PGM plus a "<file>.hdr" sidecar


def read_depth_header(path) -> dict:
    hdr = Path(str(path) + ".hdr")
    if not hdr.exists():
        raise FormatError(f"missing depth header {hdr}")
    out = {}
    for line in hdr.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line and ":" not in line:
            raise FormatError(f"{hdr}: cannot parse line {line!r}")
        key, val = (line.split("=", 1) if "=" in line else line.split(":", 1))
        out[key.strip()] = val.strip()
    enc = out.get("encoding")
    if enc not in ("linear_meters", "zbuffer"):
        raise FormatError(f"{hdr}: encoding must be linear_meters or zbuffer, got {enc!r}")
    if enc == "zbuffer" and not ("n" in out and "fz" in out):
        raise FormatError(f"{hdr}: zbuffer encoding needs n and fz")
    return out


def write_depth_header(path, encoding: str, near=None, far=None, scale=None) -> None:
    lines = [f"encoding = {encoding}", f"v_convention = {V_CONVENTION}"]
    if near is not None:
        lines += [f"n = {near!r}", f"fz = {far!r}"]
    if scale is not None:
        lines.append(f"scale = {scale!r}")
    Path(str(path) + ".hdr").write_text("\n".join(lines) + "\n")


def load_depth(path) -> DepthMap:
    """Read a depth image and decode it according to its sidecar header.

    16-bit PGM z-buffers are read as ``raw / maxval``; linear-meter PGMs are
    multiplied by the header's ``scale`` (m per count).
    """
    from .imageio import read_image

    header = read_depth_header(path)
    img, maxval = read_image(path, raw=True)
    if img.ndim != 2:
        raise FormatError("depth maps must be single-channel")
    if header["encoding"] == "zbuffer":
        v = img / maxval if maxval else img
        return linearize_zbuffer(v, float(header["n"]), float(header["fz"]))
    scale = float(header.get("scale", 1.0))
    return DepthMap(img * scale)
