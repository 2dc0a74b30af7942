"""Causal-efficacy benchmark for linear feature-finding methods on decoder-only transformers."""

__version__ = "0.1.0"
