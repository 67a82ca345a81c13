"""Compression scheme search for convolutional models."""
__version__ = "0.1.0"
