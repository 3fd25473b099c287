"""Equivariant flow matching for 3D point clouds with categorical features."""

__version__ = "0.1.0"
