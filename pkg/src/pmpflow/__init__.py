"""Numerical analysis of control-affine optimal control problems along the Pontryagin extremal flow."""

__version__ = "0.1.0"
