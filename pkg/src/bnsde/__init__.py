"""Bayesian neural SDEs: drift/diffusion networks trained with SGLD."""

__version__ = "0.1.0"
