"""Discrete optimal transport with nonlinear mobilities on ordered particle cones."""

__version__ = "0.1.0"
