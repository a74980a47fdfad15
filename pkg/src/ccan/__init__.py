"""Cascaded cross-attention aggregation for whole-slide-image bags."""

__version__ = "0.1.0"
