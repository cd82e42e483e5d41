"""Tail-quantile driver models: quantile regression and autoregressive quantile flows."""

__version__ = "0.1.0"
