"""Decoder-free segmentation toolkit built around row run-length mask text."""

__version__ = "0.1.0"
