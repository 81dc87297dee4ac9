"""Dual-currency VCG auction lab for network-slice allocation."""

__version__ = "0.1.0"
