"""Filtered policy learning for offline generative recommendation."""

__version__ = "0.1.0"
