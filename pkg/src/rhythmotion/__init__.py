"""Teach non-humanoid agents to dance from the visual rhythm of optical flow."""

__version__ = "0.1.0"
