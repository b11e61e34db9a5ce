"""Multimodal video-QA with dual-level attention and frame-selection gates, in numpy."""

__version__ = "0.1.0"
