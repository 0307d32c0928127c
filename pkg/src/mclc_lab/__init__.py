"""Desk-scale laboratory for latent diffusion inverse solvers with Langevin correction."""

__version__ = "0.1.0"
