"""Masked autoencoding pre-training for LiDAR and camera, supervised by volume rendering."""

__version__ = "0.1.0"
