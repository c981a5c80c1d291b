"""Metric-scale joint optimization of cameras, scene depth and human bodies."""

__version__ = "0.1.0"
