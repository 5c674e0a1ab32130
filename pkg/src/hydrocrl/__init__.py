"""Knowledge-constrained streamflow forecasting on watershed graphs."""

__version__ = "0.1.0"
