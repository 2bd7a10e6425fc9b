"""Trajectory reconstruction and differential-filtering analysis for a common basic cycle."""

__version__ = "0.1.0"
