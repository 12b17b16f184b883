"""Spatially selective active noise control design and simulation."""

__version__ = "0.1.0"
