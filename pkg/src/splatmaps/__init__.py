"""Per-pixel Gaussian-map reconstruction toolkit."""

__version__ = "0.1.0"
