"""Desk-scale lab: canonical latent extraction from a toy conditional
diffusion model, and robust student distillation on the result."""

__version__ = "0.1.0"
