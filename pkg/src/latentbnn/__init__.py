"""Dual-path binary neural networks with latent-weight supervision."""

__version__ = "0.1.0"
