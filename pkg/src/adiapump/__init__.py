"""Slowly driven finite-dimensional quantum systems: exact propagation,
adiabatic approximants, geometric phases and pumped charge."""

__version__ = "0.1.0"
