"""Simulation toolkit for a trusted-relay metropolitan QKD network."""

__version__ = "0.1.0"
