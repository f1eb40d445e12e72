"""Grounded text-to-video diffusion mechanisms at desk scale."""
from gvdiff._backend import BACKEND
from gvdiff.errors import GVDiffError

__version__ = "0.1.0"
__all__ = ["BACKEND", "GVDiffError", "__version__"]
