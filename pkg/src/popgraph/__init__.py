"""Masked-imputation pre-training of a graph transformer over patient population graphs."""

__version__ = "0.1.0"
