"""Dynamic super-resolution of a coarse shallow-water model on the sphere.

A coarse C-grid solver is integrated and, every ``tau`` seconds, its velocity
is replaced by the output of a U-Net trained on restricted fine-grid data.
"""
from .exceptions import DynSRError
from .grid import SphericalGrid, build_grid
from .solver import PhysicalConstants, ShallowWaterModel, SweState

__all__ = ["DynSRError", "SphericalGrid", "build_grid", "PhysicalConstants", "ShallowWaterModel",
           "SweState"]
__version__ = "0.1.0"
