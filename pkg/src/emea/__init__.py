"""Entropy-minimized ensembles of language adapters on a synthetic dialect continuum."""

__version__ = "0.1.0"
