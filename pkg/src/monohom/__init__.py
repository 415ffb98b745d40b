"""Numerical homogenization of monotone divergence-form operators on periodic tori."""

__version__ = "0.1.0"
