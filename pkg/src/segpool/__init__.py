"""Segment-level prefix cache pool: placement, dispatch, scheduling, and a cluster simulator."""

__version__ = "0.1.0"
