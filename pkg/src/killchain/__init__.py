"""Phase-aware kill chain inference engine."""

__version__ = "0.1.0"
