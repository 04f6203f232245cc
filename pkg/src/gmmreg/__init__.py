"""Gaussian-mixture point set registration for sparse radar targets."""

__version__ = "0.1.0"
