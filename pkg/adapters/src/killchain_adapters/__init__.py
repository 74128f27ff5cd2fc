"""Standalone exporters producing the engine's interchange files."""

__version__ = "0.1.0"
