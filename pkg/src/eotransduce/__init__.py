"""Desk-scale simulator of electro-optic conversion of itinerant microwave Fock states."""

__version__ = "0.1.0"
