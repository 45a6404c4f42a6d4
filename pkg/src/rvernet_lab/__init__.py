"""Desk-scale dual-branch (ROI / extra-ROI) classification lab."""

__version__ = "0.1.0"
