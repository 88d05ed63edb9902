"""Verification of machine-unlearning requests through gradient-matched perturbations."""

__version__ = "0.1.0"
