"""Kyle model with price-responsive momentum and contrarian traders."""

__version__ = "0.1.0"
