"""Scan preprocessing and on-disk PSF datasets.

A dataset is a file pair::

    <name>.manifest   JSON: format_version, metadata, per-entry (dz, r, phi)
    <name>.psfbin     little-endian float64 kernels in entry order, row-major
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeMismatch
from .psf_core import (
    FieldPoint,
    HighResScan,
    PsfKernel,
    bin_downsample,
    crop_centered,
    normalize,
)

FORMAT_NAME = "psflens-dataset"
FORMAT_VERSION = 1
MANIFEST_SUFFIX = ".manifest"
PAYLOAD_SUFFIX = ".psfbin"


def preprocess_scan(
    scan: HighResScan,
    target_pitch: float,
    size_k: int = 13,
    background: float | None = None,
) -> PsfKernel:
    """Crop around the flux centroid, sum-bin to ``target_pitch`` and normalize.

    The effective pitch is ``scan.pitch * round(target_pitch / scan.pitch)``,
    e.g. 0.3070 um * 20 = 6.14 um for a 6 um target. ``background`` is an
    optional constant subtracted (and clipped at zero) before cropping.
    """
    if background:
        scan = HighResScan(np.clip(scan.values - background, 0.0, None), scan.pitch, scan.meta)
    factor = max(1, int(round(target_pitch / scan.pitch)))
    window = crop_centered(scan, size_k * factor)
    return normalize(bin_downsample(window, factor))


@dataclass(eq=False)
class PsfDataset:
    points: tuple[FieldPoint, ...]
    kernels: np.ndarray  # (N, size_k, size_k)
    pitch: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = tuple(self.points)
        k = np.asarray(self.kernels, dtype=np.float64)
        size_k = int(self.meta.get("size_k", k.shape[1] if k.ndim == 3 else 13))
        if len(self.points) == 0:
            k = k.reshape(0, size_k, size_k)
        if k.ndim != 3 or k.shape[0] != len(self.points) or k.shape[1] != k.shape[2]:
            raise ShapeMismatch(f"kernels of shape {k.shape} for {len(self.points)} points")
        self.kernels = k
        self.meta.setdefault("size_k", int(k.shape[1]))
        self.meta.setdefault("pitch_target", float(self.pitch))

    def __len__(self):
        return len(self.points)

    @property
    def size_k(self) -> int:
        return self.kernels.shape[1]

    @property
    def entries(self) -> list[tuple[FieldPoint, PsfKernel]]:
        return [
            (fp, PsfKernel(k, self.pitch, normalized=True))
            for fp, k in zip(self.points, self.kernels)
        ]

    def field_array(self) -> np.ndarray:
        """(N, 3) array of (dz, r, phi)."""
        return np.array([p.as_tuple() for p in self.points], dtype=np.float64).reshape(-1, 3)

    def validate(self) -> None:
        """Raise FormatError on any broken dataset invariant."""
        k = self.kernels
        if not np.all(np.isfinite(k)) or np.any(k < 0):
            raise FormatError("kernels must be finite and nonnegative")
        sums = k.sum(axis=(1, 2))
        if len(sums) and np.max(np.abs(sums - 1.0)) > 1e-9:
            raise FormatError("every kernel must be normalized to unit sum")
        if self.size_k % 2 == 0:
            raise FormatError("kernel size must be odd")
        keys = [p.canonical().as_tuple() for p in self.points]
        if len(set(keys)) != len(keys):
            raise FormatError("duplicate field points")
        lo, hi = self.meta.get("dz_min"), self.meta.get("dz_max")
        rmax = self.meta.get("r_max")
        for p in self.points:
            if lo is not None and not lo <= p.dz <= hi:
                raise FormatError(f"field point {p} outside declared defocus range")
            if rmax is not None and abs(p.r) > rmax:
                raise FormatError(f"field point {p} outside declared r_max")

    def subset(self, idx) -> "PsfDataset":
        idx = np.asarray(idx, dtype=int)
        return PsfDataset(
            tuple(self.points[i] for i in idx), self.kernels[idx], self.pitch, dict(self.meta)
        )

    def lookup(self, fp: FieldPoint) -> int | None:
        key = fp.canonical().as_tuple()
        for i, p in enumerate(self.points):
            if p.canonical().as_tuple() == key:
                return i
        return None


def merge_datasets(*datasets: PsfDataset) -> PsfDataset:
    """Concatenate datasets, dropping repeated field points (first occurrence wins)."""
    if not datasets:
        raise ValueError("nothing to merge")
    base = datasets[0]
    seen, points, kernels = set(), [], []
    for ds in datasets:
        if ds.size_k != base.size_k or ds.pitch != base.pitch:
            raise ShapeMismatch("datasets differ in kernel size or pitch")
        for p, k in zip(ds.points, ds.kernels):
            key = p.canonical().as_tuple()
            if key in seen:
                continue
            seen.add(key)
            points.append(p)
            kernels.append(k)
    meta = dict(base.meta)
    meta["sampling_plan"] = [d.meta.get("sampling_plan") for d in datasets]
    meta["dz_min"] = min(d.meta.get("dz_min", 0.0) for d in datasets)
    meta["dz_max"] = max(d.meta.get("dz_max", 0.0) for d in datasets)
    arr = np.array(kernels).reshape(-1, base.size_k, base.size_k)
    return PsfDataset(tuple(points), arr, base.pitch, meta)


# ---------------------------------------------------------------------------
# persistence


def dataset_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (MANIFEST_SUFFIX, PAYLOAD_SUFFIX):
        p = p.with_suffix("")
    return Path(str(p) + MANIFEST_SUFFIX), Path(str(p) + PAYLOAD_SUFFIX)


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write via a sibling temp file and rename so readers never see partial files."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def save_dataset(ds: PsfDataset, path) -> tuple[Path, Path]:
    manifest_path, payload_path = dataset_paths(path)
    payload = np.ascontiguousarray(ds.kernels, dtype="<f8").tobytes()
    manifest = {
        "format": FORMAT_NAME,
        "format_version": FORMAT_VERSION,
        "count": len(ds),
        "size_k": ds.size_k,
        "pitch_target": ds.pitch,
        "meta": ds.meta,
        "payload": {
            "file": payload_path.name,
            "dtype": "<f8",
            "order": "entry, row, col",
            "bytes": len(payload),
            "sha256": hashlib.sha256(payload).hexdigest(),
        },
        "entries": [list(p.as_tuple()) for p in ds.points],
    }
    text = json.dumps(manifest, indent=1, sort_keys=True) + "\n"
    # payload first: a manifest never points at a missing payload
    atomic_write_bytes(payload_path, payload)
    atomic_write_bytes(manifest_path, text.encode())
    return manifest_path, payload_path


def load_dataset(path) -> PsfDataset:
    manifest_path, payload_path = dataset_paths(path)
    text = manifest_path.read_text()
    try:
        man = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: not a valid manifest ({exc})") from None
    if not isinstance(man, dict) or man.get("format") != FORMAT_NAME:
        raise FormatError(f"{manifest_path}: not a {FORMAT_NAME} manifest")
    if man.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{manifest_path}: unsupported format_version {man.get('format_version')!r}")
    try:
        count = int(man["count"])
        size_k = int(man["size_k"])
        pitch = float(man["pitch_target"])
        entries = man["entries"]
        info = man["payload"]
        meta = man["meta"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{manifest_path}: missing or malformed field ({exc})") from None
    if len(entries) != count:
        raise FormatError(f"{manifest_path}: {len(entries)} entries but count = {count}")
    data = payload_path.read_bytes()
    expected = count * size_k * size_k * 8
    if len(data) != expected or info.get("bytes") != expected:
        raise FormatError(f"{payload_path}: {len(data)} bytes, expected {expected}")
    if hashlib.sha256(data).hexdigest() != info.get("sha256"):
        raise FormatError(f"{payload_path}: checksum mismatch")
    kernels = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(count, size_k, size_k)
    points = tuple(FieldPoint(float(e[0]), float(e[1]), float(e[2])) for e in entries)
    ds = PsfDataset(points, kernels, pitch, meta)
    ds.validate()
    return ds
