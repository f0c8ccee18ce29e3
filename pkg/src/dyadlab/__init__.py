"""Desk-scale laboratory for dyadic shifts, random dyadic systems and weighted norm bounds."""

__version__ = "0.1.0"
