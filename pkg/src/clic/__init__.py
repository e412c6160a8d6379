"""Closed-loop individualized curricula for AV driving policies."""
__version__ = "0.1.0"
