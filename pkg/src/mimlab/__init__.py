"""Desk-scale masked image modeling with a frozen feature teacher."""

__version__ = "0.1.0"
