"""Deterministic edge-cloud scheduling simulator and solver library."""

__version__ = "0.1.0"
