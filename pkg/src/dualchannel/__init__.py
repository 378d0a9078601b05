"""Learned low-dimensional action embeddings for combinatorial action spaces."""

__version__ = "0.1.0"
