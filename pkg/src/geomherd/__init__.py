"""Geometric early-warning signals for herding in agent populations."""

__version__ = "0.1.0"
