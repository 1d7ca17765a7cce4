"""Chance-constrained successive-convexification trajectory toolkit."""

__version__ = "0.1.0"
