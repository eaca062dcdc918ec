"""Manually bridged score-based diffusion models for constrained generation."""

__version__ = "0.1.0"
