"""Learned blur-operator priors and diffusion-based blind deconvolution."""

__version__ = "0.1.0"
