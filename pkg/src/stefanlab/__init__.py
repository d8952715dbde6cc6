"""Homogenization of the one-phase Stefan problem with a point-like source: numerics and checks."""

__version__ = "0.1.0"
