"""Pseudo-population bootstrap for unequal-probability samples from finite populations."""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
