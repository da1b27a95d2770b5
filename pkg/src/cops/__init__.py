"""Memory-augmented personalized search re-ranking over query logs."""

__version__ = "0.1.0"
