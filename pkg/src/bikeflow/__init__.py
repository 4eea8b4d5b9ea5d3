"""Hourly bicycle-flow estimation with LSTM mixture density networks."""

__version__ = "0.1.0"
