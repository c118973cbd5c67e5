"""Exemplar-free class-agnostic counting with a repetitive region proposal network."""

__version__ = "0.1.0"
