"""Attribute-based open-world object detection pipeline on precomputed embeddings."""

__version__ = "0.1.0"
