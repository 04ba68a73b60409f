"""Temporal-coherence error estimation and frame selection for video active learning."""

__version__ = "0.1.0"
