"""Homogenization of stochastic parabolic equations in periodically perforated domains."""

__version__ = "0.1.0"
