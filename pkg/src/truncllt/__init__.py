"""Truncated transition densities of Euler schemes by Monte Carlo integration by parts."""

__version__ = "0.1.0"
