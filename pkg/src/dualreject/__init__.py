"""Selective multivariate forecasting with ambiguity and novelty rejection."""

__version__ = "0.1.0"
