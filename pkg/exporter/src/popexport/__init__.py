"""Embedding exporter for the six video/text feature sources."""

__version__ = "0.1.0"
