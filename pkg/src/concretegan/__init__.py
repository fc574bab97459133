"""Collaborative adversarial text generation in code space and text space."""

__version__ = "0.1.0"
