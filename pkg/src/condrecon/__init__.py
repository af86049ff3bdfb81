"""Reconstruction of blocky conductivities with split Bregman iteration and K-means segmentation."""

__version__ = "0.1.0"
