"""Cartography-driven worker/AI collaborative dataset creation toolkit."""

__version__ = "0.1.0"
