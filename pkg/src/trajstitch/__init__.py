"""Diffusion-based trajectory stitching for offline RL data augmentation."""

__version__ = "0.1.0"
