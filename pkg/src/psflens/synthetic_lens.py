"""Closed-form ground-truth lens used as training source and test oracle.

The PSF is an elliptical Gaussian. Its tangential axis (along the radius
vector, azimuth ``phi`` measured counter-clockwise with y pointing up) and its
sagittal axis each have their own best-focus position:

    shift_t(R) = a_field * R**2
    shift_s(R) = (a_field - b_astig) * R**2

and widen with distance from it:

    sigma(d) = sqrt(sigma0**2 + (g(d) * d)**2),  d = dz - shift(R)
    g(d) = growth * (1 + c_asym) for d > 0, growth otherwise

Pixel values are midpoint-rule integrals of the density over each pixel.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import OutOfRange
from .psf_core import (
    DEFAULT_SIZE_K,
    NATIVE_PITCH_UM,
    FieldPoint,
    HighResScan,
    PsfKernel,
)

DEFAULT_TARGET_PITCH_UM = 20 * NATIVE_PITCH_UM  # 6.14 um
DEFAULT_OVERSAMPLE = 16


@dataclass(frozen=True)
class SyntheticLensSpec:
    f: float = 6.0  # mm
    r_max: float = 3.0  # mm
    dz_min: float = -50.0  # um
    dz_max: float = 50.0  # um
    sigma0: float = 2.5  # um, best-focus blur
    growth: float = 0.12  # um of blur per um of defocus
    a_field: float = 1.0  # um / mm^2
    b_astig: float = 4.0  # um / mm^2
    c_asym: float = 0.3
    seed: int = 0  # reserved; the default lens is fully deterministic

    def __post_init__(self):
        if not self.sigma0 > 0:
            raise ValueError("sigma0 must be positive")
        if not self.r_max > 0:
            raise ValueError("r_max must be positive")
        if not self.dz_min < self.dz_max:
            raise ValueError("dz_min must be below dz_max")
        if self.c_asym == 0:
            raise ValueError("c_asym must be nonzero")
        if self.growth < 0:
            raise ValueError("growth must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticLensSpec":
        return cls(**d)


def check_range(spec: SyntheticLensSpec, dz, r) -> None:
    dz = np.asarray(dz, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if np.any(dz < spec.dz_min) or np.any(dz > spec.dz_max):
        raise OutOfRange(f"defocus outside [{spec.dz_min}, {spec.dz_max}] um")
    if np.any(np.abs(r) > spec.r_max):
        raise OutOfRange(f"|r| exceeds r_max = {spec.r_max} mm")
    if not (np.all(np.isfinite(dz)) and np.all(np.isfinite(r))):
        raise OutOfRange("non-finite field point")


def _blur(spec: SyntheticLensSpec, d):
    g = np.where(d > 0, spec.growth * (1.0 + spec.c_asym), spec.growth)
    return np.sqrt(spec.sigma0**2 + (g * d) ** 2)


def axis_widths(spec: SyntheticLensSpec, dz, r):
    """Closed-form (tangential, sagittal) Gaussian widths in um."""
    r2 = np.asarray(r, dtype=np.float64) ** 2
    dz = np.asarray(dz, dtype=np.float64)
    sig_t = _blur(spec, dz - spec.a_field * r2)
    sig_s = _blur(spec, dz - (spec.a_field - spec.b_astig) * r2)
    return sig_t, sig_s


def _subsample_offsets(n_px: int, pitch: float, oversample: int) -> np.ndarray:
    """Midpoint sample coordinates (um) along one axis, centered on the grid."""
    centers = (np.arange(n_px) - (n_px - 1) / 2.0) * pitch
    sub = ((np.arange(oversample) + 0.5) / oversample - 0.5) * pitch
    return (centers[:, None] + sub[None, :]).ravel()


def _render(spec, dz, r, phi, n_px, pitch, oversample):
    """Midpoint-integrated density for arrays of field points -> (N, n_px, n_px)."""
    dz = np.atleast_1d(np.asarray(dz, dtype=np.float64))
    r = np.atleast_1d(np.asarray(r, dtype=np.float64))
    phi = np.atleast_1d(np.asarray(phi, dtype=np.float64))
    sig_t, sig_s = axis_widths(spec, dz, r)
    theta = np.deg2rad(np.mod(phi, 360.0))
    c, s = np.cos(theta), np.sin(theta)

    xs = _subsample_offsets(n_px, pitch, oversample)  # columns, x to the right
    ys = -xs  # rows run downwards, y up
    h = pitch / oversample
    m = xs.size
    out = np.empty((dz.size, n_px, n_px))
    step = max(1, 2_000_000 // (m * m))
    for a in range(0, dz.size, step):
        sl = slice(a, a + step)
        cc, ss = c[sl, None, None], s[sl, None, None]
        u = xs[None, None, :] * cc + ys[None, :, None] * ss
        v = -xs[None, None, :] * ss + ys[None, :, None] * cc
        dens = np.exp(-0.5 * ((u / sig_t[sl, None, None]) ** 2 + (v / sig_s[sl, None, None]) ** 2))
        dens *= (h * h / (2.0 * np.pi * sig_t[sl] * sig_s[sl]))[:, None, None]
        n = dens.shape[0]
        out[sl] = dens.reshape(n, n_px, oversample, n_px, oversample).sum(axis=(2, 4))
    return out


def analytic_psf_batch(
    spec: SyntheticLensSpec,
    dz,
    r,
    phi,
    size_k: int = DEFAULT_SIZE_K,
    pitch: float = DEFAULT_TARGET_PITCH_UM,
    oversample: int = DEFAULT_OVERSAMPLE,
) -> np.ndarray:
    """Normalized kernels for many field points at once, shape (N, size_k, size_k)."""
    if size_k < 1 or size_k % 2 == 0:
        raise ValueError("size_k must be odd and positive")
    if oversample < 4:
        raise ValueError("oversample must be at least 4")
    check_range(spec, dz, r)
    vals = _render(spec, dz, r, phi, size_k, pitch, oversample)
    return vals / vals.sum(axis=(1, 2), keepdims=True)


def analytic_psf(
    spec: SyntheticLensSpec,
    fp: FieldPoint,
    size_k: int = DEFAULT_SIZE_K,
    pitch: float = DEFAULT_TARGET_PITCH_UM,
    oversample: int = DEFAULT_OVERSAMPLE,
) -> PsfKernel:
    vals = analytic_psf_batch(spec, fp.dz, fp.r, fp.phi, size_k, pitch, oversample)[0]
    return PsfKernel(vals, pitch, normalized=True)


def render_highres(
    spec: SyntheticLensSpec,
    fp: FieldPoint,
    size_px: int,
    pitch: float = NATIVE_PITCH_UM,
    oversample: int = 4,
) -> HighResScan:
    """Render the un-normalized density at instrument resolution.

    The density is centered on the scan (between pixels for even sizes), and
    total flux is 1 minus whatever falls outside the window.
    """
    check_range(spec, fp.dz, fp.r)
    vals = _render(spec, fp.dz, fp.r, fp.phi, size_px, pitch, oversample)[0]
    return HighResScan(vals, pitch, {"field_point": fp.as_tuple()})


class SyntheticLensModel:
    """Adapter exposing the analytic lens through the PSF-model query interface."""

    def __init__(
        self,
        spec: SyntheticLensSpec | None = None,
        size_k: int = DEFAULT_SIZE_K,
        pitch: float = DEFAULT_TARGET_PITCH_UM,
        oversample: int = 4,
    ):
        self.spec = spec or SyntheticLensSpec()
        self.size_k = size_k
        self.pitch = pitch
        self.oversample = oversample

    @property
    def r_max(self) -> float:
        return self.spec.r_max

    @property
    def dz_range(self) -> tuple[float, float]:
        return (self.spec.dz_min, self.spec.dz_max)

    def predict(self, dz, r, phi) -> np.ndarray:
        return analytic_psf_batch(
            self.spec, dz, r, phi, self.size_k, self.pitch, self.oversample
        )

    def describe(self) -> dict:
        return {
            "kind": "synthetic_lens",
            "spec": self.spec.to_dict(),
            "size_k": self.size_k,
            "pitch": self.pitch,
            "oversample": self.oversample,
        }


# ---------------------------------------------------------------------------
# Sampling plans


@dataclass(frozen=True)
class GridBlock:
    """Cartesian grid of defocus planes x signed radii x azimuths."""

    dz: tuple[float, ...]
    r: tuple[float, ...]
    phi: tuple[float, ...]

    def points(self):
        for dz, r, phi in itertools.product(self.dz, self.r, self.phi):
            yield (float(dz), float(r), float(phi))

    def size(self) -> int:
        return len(self.dz) * len(self.r) * len(self.phi)


@dataclass(frozen=True)
class SamplingPlan:
    name: str
    blocks: tuple[GridBlock, ...] = ()
    dedup_on_axis: bool = True
    description: str = ""

    def grid_size(self) -> int:
        return sum(b.size() for b in self.blocks)

    def field_points(self) -> list[FieldPoint]:
        """Plan points in plan order; on-axis repeats (r = 0, any phi) kept once per plane."""
        seen = set()
        out = []
        for block in self.blocks:
            for dz, r, phi in block.points():
                key = (dz, 0.0, 0.0) if (self.dedup_on_axis and r == 0.0) else (dz, r, phi)
                if key in seen:
                    continue
                seen.add(key)
                out.append(FieldPoint(*key))
        return out

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "dedup_on_axis": self.dedup_on_axis,
            "blocks": [
                {"dz": list(b.dz), "r": list(b.r), "phi": list(b.phi)} for b in self.blocks
            ],
            "grid_size": self.grid_size(),
            "point_count": len(self.field_points()),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SamplingPlan":
        blocks = tuple(
            GridBlock(tuple(b["dz"]), tuple(b["r"]), tuple(b["phi"])) for b in d["blocks"]
        )
        return cls(d["name"], blocks, d["dedup_on_axis"], d.get("description", ""))


def _steps(start, stop, n):
    return tuple(float(x) for x in np.round(np.linspace(start, stop, n), 10))


AZIMUTHS_15 = tuple(float(a) for a in range(0, 180, 15))  # 0..165, 12 values
RADII_FULL = _steps(-3.0, 3.0, 9)  # step 0.75 mm
RADII_INNER = _steps(-2.25, 2.25, 7)


def series1_plan() -> SamplingPlan:
    """High in-plane, low defocus resolution: 97 + 2 * 73 = 243 unique points."""
    return SamplingPlan(
        "series1",
        (
            GridBlock((0.0,), RADII_FULL, AZIMUTHS_15),
            GridBlock((-11.25, 11.25), RADII_INNER, AZIMUTHS_15),
        ),
        dedup_on_axis=True,
        description=(
            "focus plane: 9 signed radii x 12 azimuths (108 raw); "
            "planes +-11.25 um: 7 signed radii (|R| <= 2.25 mm) x 12 azimuths; "
            "on-axis point kept once per plane"
        ),
    )


def series2_plan() -> SamplingPlan:
    """Reduced in-plane, fine and wide defocus: 27 * 6 * 6 = 972 points."""
    return SamplingPlan(
        "series2",
        (
            GridBlock(
                _steps(-50.0, 50.0, 27),
                (-3.0, -2.0, -1.0, 1.0, 2.0, 3.0),
                tuple(float(a) for a in range(0, 180, 30)),
            ),
        ),
        dedup_on_axis=True,
        description="27 defocus planes over +-50 um x 6 signed radii x 6 azimuths",
    )


def empty_plan() -> SamplingPlan:
    return SamplingPlan("empty", (), description="no field points")


def single_plan(dz=0.0, r=0.0, phi=0.0) -> SamplingPlan:
    return SamplingPlan("single", (GridBlock((dz,), (r,), (phi,)),))


PRESETS = {
    "series1": series1_plan,
    "series2": series2_plan,
    "empty": empty_plan,
    "single": single_plan,
}


def generate_dataset(
    spec: SyntheticLensSpec,
    plan: SamplingPlan,
    size_k: int = DEFAULT_SIZE_K,
    pitch: float = DEFAULT_TARGET_PITCH_UM,
    oversample: int = DEFAULT_OVERSAMPLE,
):
    """Evaluate the analytic lens on every plan point; the manifest records spec and plan."""
    from .ingest import PsfDataset

    points = plan.field_points()
    if points:
        arr = np.array([p.as_tuple() for p in points])
        kernels = analytic_psf_batch(
            spec, arr[:, 0], arr[:, 1], arr[:, 2], size_k, pitch, oversample
        )
    else:
        kernels = np.zeros((0, size_k, size_k))
    meta = {
        "pitch_native": NATIVE_PITCH_UM,
        "pitch_target": float(pitch),
        "size_k": int(size_k),
        "r_max": spec.r_max,
        "dz_min": spec.dz_min,
        "dz_max": spec.dz_max,
        "source": {"kind": "synthetic_lens", "spec": spec.to_dict(), "oversample": oversample},
        "sampling_plan": plan.to_dict(),
    }
    return PsfDataset(tuple(points), kernels, float(pitch), meta)


def regenerate_from_meta(meta: dict):
    """Rebuild a synthetic dataset from the metadata recorded in its manifest."""
    src = meta["source"]
    plans = meta["sampling_plan"]
    if isinstance(plans, dict):
        plans = [plans]
    from .ingest import merge_datasets

    spec = SyntheticLensSpec.from_dict(src["spec"])
    parts = [
        generate_dataset(
            spec, SamplingPlan.from_dict(p), meta["size_k"], meta["pitch_target"], src["oversample"]
        )
        for p in plans
    ]
    return parts[0] if len(parts) == 1 else merge_datasets(*parts)
