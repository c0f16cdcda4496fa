"""Articulate a skinned body model from sparse 3D keypoints."""

__version__ = "0.1.0"
