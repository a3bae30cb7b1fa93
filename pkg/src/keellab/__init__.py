"""Desk-scale laboratory for residual/normalisation topologies in transformers."""

__version__ = "0.1.0"
