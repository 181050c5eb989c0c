"""ML Smoother - recursive maximum-likelihood state smoothing for state-space models."""

__version__ = "0.1.0"
