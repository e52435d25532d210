"""Bayesian tree-growth / climate models with fixed and time-varying climate effects."""

__version__ = "0.1.0"
