"""Networked cart-pole co-simulator with a time-series JEPA semantic stack."""

__version__ = "0.1.0"
