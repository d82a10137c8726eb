"""Predictive safety filters for linear systems with bounded disturbances."""

__version__ = "0.1.0"
