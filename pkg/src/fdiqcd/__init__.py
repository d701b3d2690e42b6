"""Quickest detection of false-data-injection attacks on a KCIF sensor network."""

__version__ = "0.1.0"
