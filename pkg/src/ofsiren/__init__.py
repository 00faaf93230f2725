"""Sine coordinate networks for video frames, fitted with an optical-flow constraint."""

__version__ = "0.1.0"
