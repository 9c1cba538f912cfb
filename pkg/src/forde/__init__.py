"""Particle ensembles of small MLPs repelled in input-gradient space."""

__version__ = "0.1.0"
