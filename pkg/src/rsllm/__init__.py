"""Hybrid ID/text prompting of a small causal LM for sequential recommendation."""

__version__ = "0.1.0"
