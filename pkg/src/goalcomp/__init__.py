"""Goal-oriented compression for correlated sensors."""

__version__ = "0.1.0"
