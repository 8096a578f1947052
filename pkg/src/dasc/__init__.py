"""Attribute-space weighted decoding for multi-attribute controllable generation."""

__version__ = "0.1.0"
