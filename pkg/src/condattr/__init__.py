"""Conditional counterfactual attribution for root cause analysis in multivariate time series."""

__version__ = "0.1.0"
