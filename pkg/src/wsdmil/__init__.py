"""Difficulty-aware multiple instance learning for whole-slide Gleason grading."""

__version__ = "0.1.0"
