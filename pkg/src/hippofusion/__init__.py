"""Multimodal hippocampal ROI fusion networks for AD/MCI/NC classification."""

__version__ = "0.1.0"
