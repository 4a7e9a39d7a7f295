"""Proportional credit policy optimization toolkit (numpy reference implementation)."""

__version__ = "0.1.0"
