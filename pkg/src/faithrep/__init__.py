"""Joint training of classifiers and sparse representer-point explainers."""

__version__ = "0.1.0"
