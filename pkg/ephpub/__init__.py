"""Ephemeral publishing through DNS resolver caches"""

__version__ = "1.0.0"
