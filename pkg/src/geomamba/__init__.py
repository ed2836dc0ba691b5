"""Geometry-driven optical/SAR fine-grained cross-modal retrieval, desk scale."""

__version__ = "0.1.0"
