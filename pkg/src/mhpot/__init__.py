"""Multi-head interatomic potential pre-training toolkit (toy scale)."""

__version__ = "0.1.0"
