"""Learned octree codec for compressing collections of 3D shapes."""

__version__ = "0.1.0"
