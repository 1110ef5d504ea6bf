"""Stochastic PV hosting-capacity analysis for radial distribution feeders."""

__version__ = "0.1.0"
