"""Spatiotemporal functional models for station-day count curves."""

__version__ = "0.1.0"
