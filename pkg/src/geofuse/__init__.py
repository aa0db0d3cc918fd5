"""Geomodel generation, seawater-intrusion simulation, U-FNO surrogates and
ESMDA calibration at desk scale."""

__version__ = "0.1.0"
