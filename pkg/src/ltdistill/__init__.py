"""Desk-scale long-tailed dataset distillation with adaptive soft-label alignment."""

__version__ = "0.1.0"
