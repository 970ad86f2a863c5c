"""Gaussian-process few-shot classification with mirror-descent inference."""

__version__ = "0.1.0"
