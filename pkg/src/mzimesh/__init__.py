"""Calibration and surrogate modelling for 3x3 MZI-mesh optical matrix multipliers."""

__version__ = "0.1.0"
