"""Masked-diffusion sampling laboratory with exact-posterior oracles."""

__version__ = "0.1.0"
