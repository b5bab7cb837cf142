"""flowedit: desk-scale flow-matching generation and latent-space image editing."""

__version__ = "0.1.0"
