"""Spectral simulator and verification toolkit for stochastically forced
incompressible flow on the periodic torus."""

__version__ = "0.1.0"
