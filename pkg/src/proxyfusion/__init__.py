"""Bayesian fusion of sparse point observations with a dense gridded proxy."""

__version__ = "0.1.0"
