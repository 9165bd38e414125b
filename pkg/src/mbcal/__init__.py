"""Calibration of multibody models with regularized, stabilized dynamics."""

__version__ = "0.1.0"
