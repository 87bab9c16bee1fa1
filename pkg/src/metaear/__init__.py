"""Simulated resonator-array capture and band-stitching speech reconstruction."""

from __future__ import annotations

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
