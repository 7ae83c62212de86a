"""Supervised hierarchical graph clustering for speaker diarization."""

__version__ = "0.1.0"
