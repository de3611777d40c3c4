"""Decoupled gradient flow for prestrained Föppl–von Kármán bilayer plates."""

__version__ = "0.1.0"
