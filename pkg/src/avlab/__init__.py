"""Desk-scale laboratory for weakly supervised audio-visual anomaly detection."""

__version__ = "0.1.0"
