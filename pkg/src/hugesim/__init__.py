"""Trace-driven simulator of multi-size-page memory management."""

__version__ = "0.1.0"
