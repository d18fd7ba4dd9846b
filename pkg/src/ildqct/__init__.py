"""Quantitative CT texture analysis for fibrosing interstitial lung disease."""

__version__ = "0.1.0"
