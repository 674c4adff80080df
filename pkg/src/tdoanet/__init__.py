"""Distributed target tracking over sensor networks with linear TDOA measurements."""

__version__ = "0.1.0"
