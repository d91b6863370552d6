"""Count regression toolkit for bike-sharing station data."""

__version__ = "0.1.0"
