"""Region-based non-local attention for space-time feature clips."""

__version__ = "0.1.0"
