"""Faster R-CNN style white-blood-cell detection and counting in numpy."""

__version__ = "0.1.0"
