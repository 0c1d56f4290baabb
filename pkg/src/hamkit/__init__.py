"""Horizon activation maps for small forecasting models."""

__version__ = "0.1.0"
