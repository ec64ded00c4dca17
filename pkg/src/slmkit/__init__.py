"""Distill, prune and quantize a toy decoder-only transformer."""

__version__ = "0.1.0"
