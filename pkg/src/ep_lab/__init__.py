"""Engagement processes: decoupled intervention/observation event streams over ticks."""

__version__ = "0.1.0"
