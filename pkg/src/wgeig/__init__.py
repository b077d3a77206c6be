"""Weak Galerkin eigensolver for the Dirichlet Laplacian with two-grid and
two-space acceleration."""

__version__ = "0.1.0"
