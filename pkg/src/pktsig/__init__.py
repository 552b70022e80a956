"""Packet-level signatures for smart-home event inference."""

__version__ = "0.1.0"
