"""Exchangeable density estimation for sets of points."""

__version__ = "0.1.0"
