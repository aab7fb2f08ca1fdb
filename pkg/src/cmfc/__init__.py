"""Constrained mean-field control: particle SDEs, adjoint BSDEs, multiplier checks."""

__version__ = "0.1.0"
