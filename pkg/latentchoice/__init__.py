"""Latent-variable discrete choice estimation with C-RBMs and ICLV models."""

__version__ = "0.1.0"
