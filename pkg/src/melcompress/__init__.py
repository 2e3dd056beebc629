"""Desk-scale lab for compressing masked-prediction speech Transformers."""

__version__ = "0.1.0"
