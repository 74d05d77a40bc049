"""Multimodal masked autoencoder (desk-scale, numpy autodiff)."""

__version__ = "0.1.0"
