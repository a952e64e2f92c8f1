"""Hierarchical multimodal pretraining for EHR-shaped data."""

__version__ = "0.1.0"
