"""Derivative-informed sparse Gaussian processes with streaming updates and
a fatigue-crack digital-twin harness."""

__version__ = "0.1.0"
