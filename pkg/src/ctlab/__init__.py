"""Contact-tracing attack laboratory."""

__version__ = "0.1.0"
