"""Masked-image-modeling vision transformer toolkit for ECG images."""

__version__ = "0.1.0"
