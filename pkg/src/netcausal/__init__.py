"""Causal effect estimation under network interference with mean-field methods."""

__version__ = "0.1.0"
