"""Hierarchical multi-agent guidewire navigation on synthetic vascular trees."""

__version__ = "0.1.0"
