"""Adapter that turns raw decoder-probability dumps into `.dbk` datasets."""

__version__ = "0.1.0"
