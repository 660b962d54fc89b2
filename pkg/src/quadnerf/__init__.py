"""Coarse-to-fine non-rigid radiance fields with neural blend skinning and a
local quadratic deformation model."""

__version__ = "0.1.0"
