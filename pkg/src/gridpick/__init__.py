"""Desk-scale compositional pick-and-place benchmark and transporter agents."""

__version__ = "0.1.0"
