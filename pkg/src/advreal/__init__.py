"""Adversarial patch generation and evaluation toolkit.

Optimizes a printable texture that suppresses a bundled differentiable person
detector, jointly over 2D composited scenes and 3D rendered scenes with
non-rigid garment deformation, perspective-consistent placement, and
photometric relighting.
"""

__version__ = "0.1.0"

from .errors import AdvRealError, DomainError, ManifestError, NumericalError

__all__ = [
    "AdvRealError",
    "DomainError",
    "ManifestError",
    "NumericalError",
    "__version__",
]
