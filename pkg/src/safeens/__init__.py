"""Ensembles of learned safety filters over a simulated perception pipeline."""
from __future__ import annotations

__version__ = "0.1.0"
