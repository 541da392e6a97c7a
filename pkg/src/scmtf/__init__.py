"""Supervised coupled matrix-tensor factorization for temporal cohort data."""

__version__ = "0.1.0"
