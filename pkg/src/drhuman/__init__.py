"""Desk-scale differentiable human avatars: silhouette-driven mesh refinement and UV texture recovery."""

__version__ = "0.1.0"
