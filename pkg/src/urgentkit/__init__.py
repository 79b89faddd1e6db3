"""Multi-stage speech enhancement toolkit."""

__version__ = "0.1.0"
