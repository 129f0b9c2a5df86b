"""Degradation-robust object detection with a training-only restoration decoder."""

__version__ = "0.1.0"
