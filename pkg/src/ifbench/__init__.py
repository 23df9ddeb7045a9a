"""Benchmark toolkit for synthesising Cell Painting IF channels from brightfield."""
__version__ = "0.1.0"
