"""Adversarial-audio detection from output-token distribution statistics."""

__version__ = "0.1.0"
