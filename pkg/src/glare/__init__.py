"""Hierarchical quotient-graph EdgeConv classifier for facial landmark graphs."""

__version__ = "0.1.0"
