"""Counterfactual learning-to-rank with last-click propensity sampling."""

__version__ = "0.1.0"
