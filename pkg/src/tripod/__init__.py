"""Joint trajectory and pose forecasting with interaction graphs and visibility-aware metrics."""

__version__ = "0.1.0"
