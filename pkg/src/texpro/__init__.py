"""Procedural PBR materials for part-segmented meshes, fitted to reference images."""

__version__ = "0.1.0"
