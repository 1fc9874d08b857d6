"""Sparse voxel engine and enhancement pipeline for compressed dynamic point clouds."""

__version__ = "0.1.0"
