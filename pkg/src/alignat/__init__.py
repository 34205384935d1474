"""Alignment-triggered non-autoregressive sequence transduction toolkit."""

__version__ = "0.1.0"
