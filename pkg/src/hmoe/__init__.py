"""Sparse mixture-of-experts routing for audio-visual sequence models."""

__version__ = "0.1.0"
