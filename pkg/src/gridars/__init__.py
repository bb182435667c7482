"""Hierarchical augmented random search for emergency load-shedding voltage control."""

__version__ = "0.1.0"
