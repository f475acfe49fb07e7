"""Globally sparse, dense-compensated cue fusion for multi-frame depth."""

__version__ = "0.1.0"
