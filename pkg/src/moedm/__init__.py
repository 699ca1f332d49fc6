"""Offline dialogue management over a mixture of latent experts, at desk scale."""

__version__ = "0.1.0"
