"""Continuous-time jump MDPs where the controller also picks the next observation time."""

__version__ = "0.1.0"
