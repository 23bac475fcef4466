"""Dual volume-preserving flows with KL alignment for continual learning."""

__version__ = "0.1.0"
