"""Unbiased MCMC with coupled blocked Gibbs samplers."""

__version__ = "0.1.0"
