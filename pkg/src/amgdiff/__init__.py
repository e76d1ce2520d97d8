"""Anomaly-map guided classifier-free diffusion for vibration health monitoring."""
from . import errors

__version__ = "0.1.0"

__all__ = ["errors", "__version__"]
