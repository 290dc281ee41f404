"""Plug-and-play reconstruction with test-time adaptation of the denoising prior."""

__version__ = "0.1.0"
