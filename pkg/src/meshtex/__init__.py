"""Text-to-texture engine: latent-diffusion sampling in UV texture space."""

__version__ = "0.1.0"
