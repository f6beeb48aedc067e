"""Progressive steerable t-SNE engine."""

__version__ = "0.1.0"
