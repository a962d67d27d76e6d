"""Propensity estimation from imagery under image-pattern confounding."""

__version__ = "0.1.0"
