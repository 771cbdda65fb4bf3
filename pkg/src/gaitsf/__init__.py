"""Unsupervised cloth-robust gait recognition with selective fusion, at desk scale."""

__version__ = "0.1.0"
