"""Deterministic multicore cache simulator with a priority work-stealing runtime."""

__version__ = "0.1.0"
