"""Hurdle log-normal state-space models for minute-level in-play betting stakes."""

__version__ = "0.1.0"
