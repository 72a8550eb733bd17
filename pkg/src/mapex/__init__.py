"""Task-driven point-cloud compression and collaborative exploration toolkit."""

__version__ = "0.1.0"
