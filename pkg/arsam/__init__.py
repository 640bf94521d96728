"""Sharpness-aware optimization toolkit: SGD, SAM, SAM-k, ARSAM and ARSAM-A."""

__version__ = "1.0.0"
