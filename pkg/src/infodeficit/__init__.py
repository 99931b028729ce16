"""Information-deficit sequence models for search-session query reformulation."""

__version__ = "0.1.0"
