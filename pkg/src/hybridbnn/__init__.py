"""Hybrid Bayesian neural networks with dense, variational and sparse GP layers."""

from hybridbnn.numerics import NotPositiveDefinite, Rng

__version__ = "0.1.0"

__all__ = ["NotPositiveDefinite", "Rng", "__version__"]
