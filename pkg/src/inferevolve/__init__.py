"""Evolutionary search engine for causal-effect-estimator programs."""

__version__ = "0.1.0"
