"""Unpaired microscopy translation and pseudo-label generation toolkit."""

__version__ = "0.1.0"
