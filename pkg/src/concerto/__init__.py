"""Desk-scale joint 2D-3D self-supervised point cloud representation learning."""

__version__ = "0.1.0"
