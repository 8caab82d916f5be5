"""Optimal marketing control for a user base growing under network effects."""

__version__ = "0.1.0"
