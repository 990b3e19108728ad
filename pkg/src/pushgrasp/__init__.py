"""Equivariant push-grasp learning on a deterministic 2D tabletop."""

__version__ = "0.1.0"
