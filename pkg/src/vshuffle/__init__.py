"""Diffusion style transfer by value shuffling in self-attention, with its baselines."""

__version__ = "0.1.0"
