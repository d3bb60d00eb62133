"""Robust imitation learning across perturbed environment dynamics."""

__version__ = "0.1.0"
