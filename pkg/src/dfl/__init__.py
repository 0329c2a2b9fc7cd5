"""Deep multi-factor learning with stock-graph neutralization."""

__version__ = "0.1.0"
