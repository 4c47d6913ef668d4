"""Desk-scale laboratory for adaptive simultaneous machine translation."""

from ._alloc import tune_allocator

tune_allocator()

__version__ = "0.1.0"
