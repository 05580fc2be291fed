"""Continual-learning plasticity lab: ReLU MLPs, Hessian spectra and trainability bounds."""

__version__ = "0.1.0"
