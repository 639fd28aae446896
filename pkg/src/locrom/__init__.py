"""Localized model order reduction for 2-D linear elastic heterogeneous structures."""

__version__ = "0.1.0"
