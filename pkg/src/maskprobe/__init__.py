"""Learned relevance masks for probing a frozen monocular depth network."""

__version__ = "0.1.0"
