"""Dirichlet-latent VAE with logistic classifier heads and latent-traversal explanations."""

__version__ = "0.1.0"
