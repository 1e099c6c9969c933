"""Training-free isolated attention for consistent multi-scene character generation."""

__version__ = "0.1.0"
