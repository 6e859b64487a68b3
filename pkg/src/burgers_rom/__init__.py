"""Stochastic parametric reduced-order modeling toolkit for the viscous Burgers equation.

Data generation (exact and finite-difference solutions), a classical
Galerkin projection baseline, convolutional-autoencoder dimension reduction,
parametric reservoir computing with a normalizing-flow error model, and the
composed surrogate with its evaluation metrics and experiment pipeline.
"""

__version__ = "0.1.0"
