"""Desk-scale RNN-transducer toolkit with label-preserving input perturbation
of the prediction network."""

__version__ = "0.1.0"
