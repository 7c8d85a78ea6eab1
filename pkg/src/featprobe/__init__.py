"""Relating convolutional audio features to hand-crafted signal-processing features."""

__version__ = "0.1.0"
