"""Contextual topic suggestion for open-domain conversational agents."""

__version__ = "0.1.0"
