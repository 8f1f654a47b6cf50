"""Compressed-domain classification on scale-hyperprior latents."""

__version__ = "0.1.0"
