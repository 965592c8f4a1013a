"""Timeframe transformers for ICU time series, trained and explained end to end."""

__version__ = "0.1.0"
