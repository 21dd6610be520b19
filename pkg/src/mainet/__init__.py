"""Trimodal feeding-intensity classification: numpy autodiff, attention fusion, evidential decisions."""

__version__ = "0.1.0"
