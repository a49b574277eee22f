"""Intersections of two planar random walk ranges: simulation and rate functions."""

__version__ = "0.1.0"
