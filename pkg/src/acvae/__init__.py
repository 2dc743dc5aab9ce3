"""Adversarial and contrastive sequential VAE for next-item recommendation."""

__version__ = "0.1.0"
