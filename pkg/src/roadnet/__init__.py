"""Road-network instruction datasets for aerial tiles, and their evaluation."""

__version__ = "0.1.0"
