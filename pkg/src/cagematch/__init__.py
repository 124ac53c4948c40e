"""Pose-invariant retrieval and cage deformation for partial point clouds."""

__version__ = "0.1.0"
