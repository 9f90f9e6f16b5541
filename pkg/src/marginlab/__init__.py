"""Jacobian-based margin bounds and generalization analysis for small networks."""

__version__ = "0.1.0"
