"""Desk-scale learned non-Cartesian dynamic-MRI compressed sensing."""

__version__ = "0.1.0"
