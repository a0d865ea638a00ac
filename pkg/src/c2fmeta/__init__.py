"""Coarse-to-fine pseudo-labelling guided meta-learning with bi-level discriminative embeddings."""

__version__ = "0.1.0"
