"""Analogical text-concept generation for generalized category discovery."""

__version__ = "0.1.0"
