"""Attribute-conditioned face synthesis with a hand-written mini-CNN."""

__version__ = "0.1.0"
