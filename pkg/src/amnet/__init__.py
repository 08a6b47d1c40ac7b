"""Masked pre-training of Transformer encoders on student interaction sequences."""

__version__ = "0.1.0"
