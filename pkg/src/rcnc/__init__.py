"""Deadline-constrained least-cost routing and service-chain delivery."""

__version__ = "0.1.0"
