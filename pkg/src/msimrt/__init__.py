"""Multistage stochastic fluence planning with SDDP under organ motion."""

__version__ = "0.1.0"
