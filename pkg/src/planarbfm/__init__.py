"""Frozen behavior-model adaptation with learned task tokens on a planar control suite."""

__version__ = "0.1.0"
