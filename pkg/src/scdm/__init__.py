"""Stochastic conditional diffusion with Label Diffusion, at desk scale."""

__version__ = "0.1.0"
