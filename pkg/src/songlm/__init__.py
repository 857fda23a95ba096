"""Sequence models and attention analyses for tokenized birdsong-like corpora."""

__version__ = "0.1.0"
