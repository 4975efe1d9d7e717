"""Finite-depth machinery for bi-parameter Haar multipliers and Haar system Hardy spaces."""

__version__ = "0.1.0"
