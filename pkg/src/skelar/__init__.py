"""Skeleton-anchored activity representations for sensor-based HAR."""

__version__ = "0.1.0"
