"""Synchronized multi-IMU hand capture: simulation, time sync, calibration, spectra, retargeting."""
__version__ = "0.1.0"
