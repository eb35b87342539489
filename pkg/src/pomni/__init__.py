"""Multimodal physiological-signal foundation model pipeline at desk scale."""

__version__ = "0.1.0"
