"""Counterfactual learning-to-rank and off-policy bandit laboratory."""

__version__ = "0.1.0"
