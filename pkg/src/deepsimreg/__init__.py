"""Deformable image registration with learned (DeepSim) similarity metrics, in numpy."""

__version__ = "0.1.0"
