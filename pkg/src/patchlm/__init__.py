"""Byte-level language model with patched delegate attention and a TCN feed-forward block."""

__version__ = "0.1.0"
