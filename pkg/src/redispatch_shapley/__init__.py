"""Shapley allocation of congestion redispatch costs to overloaded lines."""

__version__ = "0.1.0"
