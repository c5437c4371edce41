"""Adaptive column selection for inverse-regression sufficient dimension reduction."""

__version__ = "0.1.0"
