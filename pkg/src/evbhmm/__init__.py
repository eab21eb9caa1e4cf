"""Aggregated EV fleet modelling, bilinear HMM identification and regulation."""

__version__ = "0.1.0"
