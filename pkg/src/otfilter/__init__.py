"""Optimal transport filtering with EnKF and SIR baselines."""

__version__ = "0.1.0"
