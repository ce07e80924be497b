"""Weighted CUSUM monitoring of serially correlated directed networks."""

__version__ = "0.1.0"
