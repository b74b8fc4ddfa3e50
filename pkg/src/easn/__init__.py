"""Learned image compression toolkit built on adaptive scaling normalization."""

__version__ = "0.1.0"
