"""Numerical Gibbs-Markov inducing structures for solenoid models."""

__version__ = "0.1.0"
