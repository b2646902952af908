"""Variational estimation and bootstrap inference for mixed membership
models of binary responses."""

__version__ = "0.1.0"
