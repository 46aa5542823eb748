"""Differentially private few-shot transfer learning workbench."""

__version__ = "0.1.0"
