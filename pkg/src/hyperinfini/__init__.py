"""Query-conditioned adapter generation and query-focused compressive memory for QFS."""

__version__ = "0.1.0"
