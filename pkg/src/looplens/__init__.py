"""Bike-sharing self-loop detection and spatial/causal analysis."""

__version__ = "0.1.0"
