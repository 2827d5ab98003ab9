"""Attention multiple-instance learning for slide-level MSI-H prediction."""

__version__ = "0.1.0"
