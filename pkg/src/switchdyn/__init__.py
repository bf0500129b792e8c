"""Switching dynamical systems for trajectory prediction and occlusion reasoning."""

__version__ = "0.1.0"
