"""Capability-targeted self-improvement pipeline for tool-using agents."""

__version__ = "0.1.0"
