"""Desk-scale rectified-flow image restoration."""

__version__ = "0.1.0"
