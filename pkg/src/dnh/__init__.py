"""Dynamic nested hierarchies of associative-memory levels."""

__version__ = "0.1.0"
