"""Deterministic sequence-parallel training simulator and iteration-time planner."""

__version__ = "0.1.0"
