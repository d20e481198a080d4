"""Coherent transceiver model with built-in polarization/phase sensing."""

__version__ = "0.1.0"
