"""PSF kernel containers, normalization, flux-preserving binning and bilinear kernel mixing.

Kernels are stored row-major with row index growing downwards. The kernel
center is pixel ``(size_k - 1) // 2``; mass away from the center is kept as is
(it encodes local distortion) and is never shifted back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AllZeroKernel, NonDivisibleSize, ShapeMismatch, WindowOutOfBounds

DEFAULT_SIZE_K = 13
NATIVE_PITCH_UM = 0.3070
NORMALIZED_ATOL = 1e-9


@dataclass(frozen=True)
class FieldPoint:
    """Model input: defocus ``dz`` (um), signed image height ``r`` (mm), azimuth ``phi`` (deg)."""

    dz: float
    r: float
    phi: float

    def canonical(self) -> "FieldPoint":
        """Fold the sign of ``r`` into the azimuth and wrap ``phi`` into [0, 360).

        On-axis points get ``phi = 0`` since the azimuth is undefined there.
        """
        r, phi = float(self.r), float(self.phi)
        if r < 0:
            r, phi = -r, phi + 180.0
        if r == 0.0:
            return FieldPoint(float(self.dz), 0.0, 0.0)
        phi = phi % 360.0
        if phi == 360.0:  # tiny negative inputs round up
            phi = 0.0
        return FieldPoint(float(self.dz), r, phi)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.dz, self.r, self.phi)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PsfKernel:
    """Odd-sized square grid of nonnegative intensities at a given pitch (um/pixel)."""

    values: np.ndarray
    pitch: float
    normalized: bool = False

    def __post_init__(self):
        v = _readonly(self.values)
        if v.ndim != 2 or v.shape[0] != v.shape[1] or v.shape[0] % 2 == 0:
            raise ShapeMismatch(f"kernel must be odd square, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("kernel values must be finite and nonnegative")
        if not self.pitch > 0:
            raise ValueError("pitch must be positive")
        if self.normalized and abs(v.sum() - 1.0) > NORMALIZED_ATOL:
            raise ValueError(f"kernel flagged normalized but sums to {v.sum()!r}")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "pitch", float(self.pitch))

    @property
    def size_k(self) -> int:
        return self.values.shape[0]

    @property
    def center(self) -> int:
        return (self.size_k - 1) // 2

    def total(self) -> float:
        return float(self.values.sum())

    def centroid(self) -> tuple[float, float]:
        """Flux centroid (row, col) in pixel-index coordinates."""
        return flux_centroid(self.values)

    def __eq__(self, other):
        if not isinstance(other, PsfKernel):
            return NotImplemented
        return (
            self.pitch == other.pitch
            and self.normalized == other.normalized
            and np.array_equal(self.values, other.values)
        )

    def __hash__(self):
        return hash((self.values.tobytes(), self.pitch, self.normalized))


@dataclass(frozen=True, eq=False)
class HighResScan:
    """A measured (or rendered) PSF at instrument resolution."""

    values: np.ndarray
    pitch: float = NATIVE_PITCH_UM
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = _readonly(self.values)
        if v.ndim != 2:
            raise ShapeMismatch(f"scan must be 2-D, got shape {v.shape}")
        if not self.pitch > 0:
            raise ValueError("pitch must be positive")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("scan values must be finite and nonnegative")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "pitch", float(self.pitch))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def centroid(self) -> tuple[float, float]:
        return flux_centroid(self.values)


def flux_centroid(values: np.ndarray) -> tuple[float, float]:
    total = values.sum()
    if total <= 0:
        raise AllZeroKernel("centroid of an all-zero grid is undefined")
    rows = np.arange(values.shape[0], dtype=np.float64)
    cols = np.arange(values.shape[1], dtype=np.float64)
    return (
        float(rows @ values.sum(axis=1) / total),
        float(cols @ values.sum(axis=0) / total),
    )


def normalize(kernel: PsfKernel) -> PsfKernel:
    total = kernel.values.sum()
    if total <= 0:
        raise AllZeroKernel("cannot normalize a kernel whose values sum to 0")
    return PsfKernel(kernel.values / total, kernel.pitch, normalized=True)


def crop_centered(
    scan: HighResScan,
    out_px: int,
    center_row: float | None = None,
    center_col: float | None = None,
) -> HighResScan:
    """Cut an ``out_px`` square window around a (possibly fractional) center.

    The center defaults to the flux centroid. For an integer center and even
    ``out_px`` the center pixel is the lower-right one of the central four,
    e.g. out_px=10 around row 50 gives rows 45..54. A half-integer center
    (as produced by a symmetric even-sized scan) gives an exactly centered
    window. Windows leaving the scan raise instead of padding.
    """
    if out_px < 1 or out_px > min(scan.width, scan.height):
        raise WindowOutOfBounds(f"window {out_px} does not fit scan {scan.values.shape}")
    if center_row is None or center_col is None:
        c_row, c_col = scan.centroid()
        center_row = c_row if center_row is None else center_row
        center_col = c_col if center_col is None else center_col
    if not (0 <= center_row <= scan.height - 1 and 0 <= center_col <= scan.width - 1):
        raise WindowOutOfBounds("crop center outside the scan")
    # 1e-6 guards against centroid round-off flipping the ceil
    r0 = math.ceil(center_row - out_px / 2 - 1e-6)
    c0 = math.ceil(center_col - out_px / 2 - 1e-6)
    if r0 < 0 or c0 < 0 or r0 + out_px > scan.height or c0 + out_px > scan.width:
        raise WindowOutOfBounds(
            f"window rows {r0}..{r0 + out_px - 1}, cols {c0}..{c0 + out_px - 1} "
            f"leaves scan of shape {scan.values.shape}"
        )
    window = scan.values[r0 : r0 + out_px, c0 : c0 + out_px]
    meta = dict(scan.meta, crop_origin=(r0, c0))
    return HighResScan(window, scan.pitch, meta)


def bin_downsample(scan: HighResScan, factor: int) -> PsfKernel:
    """Sum ``factor`` x ``factor`` blocks; total flux is conserved."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    h, w = scan.values.shape
    if h != w or h % factor:
        raise NonDivisibleSize(f"scan {h}x{w} is not a square multiple of {factor}")
    k = h // factor
    if k % 2 == 0:
        raise NonDivisibleSize(f"binned size {k} is even; kernels must be odd")
    binned = scan.values.reshape(k, factor, k, factor).sum(axis=(1, 3))
    return PsfKernel(binned, scan.pitch * factor)


def interpolate_kernels(
    k00: PsfKernel, k10: PsfKernel, k01: PsfKernel, k11: PsfKernel, wx: float, wy: float
) -> PsfKernel:
    """Bilinear mix; ``wx`` moves from k00 towards k10, ``wy`` from k00 towards k01."""
    ks = (k00, k10, k01, k11)
    if any(k.values.shape != k00.values.shape or k.pitch != k00.pitch for k in ks):
        raise ShapeMismatch("all four kernels must share size and pitch")
    if not (0.0 <= wx <= 1.0 and 0.0 <= wy <= 1.0):
        raise ValueError("interpolation weights must lie in [0, 1]")
    values = bilinear_mix(k00.values, k10.values, k01.values, k11.values, wx, wy)
    out = PsfKernel(values, k00.pitch)
    if all(k.normalized for k in ks) and abs(out.total() - 1.0) <= NORMALIZED_ATOL:
        out = PsfKernel(values, k00.pitch, normalized=True)
    return out


def bilinear_mix(a00, a10, a01, a11, wx, wy):
    """Elementwise bilinear combination; works for scalars and broadcasting arrays.

    The evaluation order is fixed so that scalar and vectorized callers get
    bit-identical results.
    """
    return (
        (1 - wx) * (1 - wy) * a00
        + wx * (1 - wy) * a10
        + (1 - wx) * wy * a01
        + wx * wy * a11
    )
