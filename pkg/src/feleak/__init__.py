"""Toolkit for the first-layer leakage attack on FE-trained networks and the
split-training mitigation that closes it."""

__version__ = "0.1.0"
