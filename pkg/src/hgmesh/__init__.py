"""Hourglass transformer toolkit for autoregressive triangle-mesh generation."""

__version__ = "0.1.0"
