"""Anatomy-calibrated lesion detection and evaluation toolkit for lacunes and EPVS."""

__version__ = "0.1.0"
