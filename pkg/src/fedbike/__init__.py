"""Federated gradient-boosted forecasting of hourly bike-station demand."""

__version__ = "0.1.0"
