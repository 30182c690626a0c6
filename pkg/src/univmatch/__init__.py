"""Cycle-consistent keypoint matching through learned per-category 3D universe points."""

__version__ = "0.1.0"
