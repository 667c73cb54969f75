"""Segmentation-guided, style-modulated 3D GAN for low-dose to full-dose volume translation."""

__version__ = "0.1.0"
