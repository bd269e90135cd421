"""Panoptic label transfer from coarse 3D primitives through a radiance field."""

__version__ = "0.1.0"
