"""Focal-stack synthesis, learned multi-focus fusion and diffusion-based restoration."""

__version__ = "0.1.0"
