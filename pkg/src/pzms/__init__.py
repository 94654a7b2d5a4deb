"""Placebo-zone model selection for discontinuity and kink designs."""

__version__ = "0.1.0"
