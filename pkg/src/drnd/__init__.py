"""Distributional random network distillation: bonuses, estimator checks, and desk-scale agents."""

__version__ = "0.1.0"
