"""Bayesian semantic segmentation with Monte Carlo dropout."""
