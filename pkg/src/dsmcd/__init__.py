"""Multimodal (DSM-to-image) building change detection with multitask consistency."""

__version__ = "0.1.0"
