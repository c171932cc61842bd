"""Finite-element tools for p-harmonic maps with a sphere-constrained free boundary."""

from .field import VectorField, gradient, sample
from .mesh import Box, HalfBall, HalfBox, Mesh, MeshError, NodeClass, ProblemSpec, build_mesh, mesh_for

__version__ = "0.1.0"

__all__ = [
    "Box",
    "HalfBall",
    "HalfBox",
    "Mesh",
    "MeshError",
    "NodeClass",
    "ProblemSpec",
    "VectorField",
    "build_mesh",
    "gradient",
    "mesh_for",
    "sample",
    "__version__",
]
