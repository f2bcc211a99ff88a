"""Robustness test suites for Siamese verification systems."""

__version__ = "0.1.0"
