"""Kinetic agent dynamics on graphs with optimal feedback control."""

__version__ = "0.1.0"
