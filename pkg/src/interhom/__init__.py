"""Correctors and two-scale diagnostics for elliptic media glued along a flat interface."""

__version__ = "0.1.0"
