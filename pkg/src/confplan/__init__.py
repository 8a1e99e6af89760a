"""Conformal-prediction-aware planning and fine-tuning for grid-world missions."""

__version__ = "0.1.0"
