"""Differential phase sensing with two spin ensembles in a decoherence-free subspace."""

__version__ = "0.1.0"
