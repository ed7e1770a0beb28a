"""Partial identification of causal queries under unobserved confounding."""

__version__ = "0.1.0"
