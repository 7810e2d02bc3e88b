"""Differentially private SGD for anomaly, novelty and backdoor detection."""

__version__ = "0.1.0"
