"""Field- and defocus-dependent PSF modelling and spatially variant image degradation."""

__version__ = "0.1.0"

from .errors import PsfError  # noqa: E402
from .psf_core import FieldPoint, HighResScan, PsfKernel  # noqa: E402

__all__ = ["FieldPoint", "HighResScan", "PsfError", "PsfKernel", "__version__"]
