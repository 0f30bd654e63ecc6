"""Numerical verification of exponential dichotomies for asymptotically
autonomous linear delay equations."""

__version__ = "0.1.0"
REPORT_SCHEMA_VERSION = "1"
