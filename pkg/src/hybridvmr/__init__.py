"""Hybrid-learning video moment retrieval on synthetic two-domain data."""

from . import autodiff, errors

__all__ = ["autodiff", "errors"]
__version__ = "0.1.0"
