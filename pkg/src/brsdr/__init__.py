"""Doubly robust ATE estimation by Bayesian regression synthesis."""

__version__ = "0.1.0"
