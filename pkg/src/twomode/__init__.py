"""Simulation and analysis of two-mode Gaussian entanglement experiments."""

__version__ = "0.1.0"
