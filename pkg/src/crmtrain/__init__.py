"""Conformal risk minimization with variance-reduced quantile gradients."""

__version__ = "0.1.0"
