"""Causal-graph discovery and movement prediction for multi-stock data."""

__version__ = "0.1.0"
