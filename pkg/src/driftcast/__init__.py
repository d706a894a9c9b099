"""Multi-horizon entity metric forecasting with drift-aware daily online updates."""

__version__ = "0.1.0"
