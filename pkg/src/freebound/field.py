"""Piecewise-affine nodal vector fields and their element-wise kinematics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .mesh import Mesh


@dataclass(frozen=True, eq=False)
class VectorField:
    """Nodal values ``u: nodes -> R^N`` on ``mesh``; ``values`` has shape (nv, N)."""

    mesh: Mesh
    values: np.ndarray
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.ndim != 2 or vals.shape[0] != self.mesh.num_nodes:
            raise ValueError(
                f"expected one value per node ({self.mesh.num_nodes}), got shape {vals.shape}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("field values must be finite at every node")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def N(self) -> int:
        return self.values.shape[1]

    def with_values(self, values: np.ndarray) -> "VectorField":
        return VectorField(self.mesh, values, dict(self.meta))

    def component(self, i: int) -> "VectorField":
        return VectorField(self.mesh, self.values[:, i : i + 1])

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.values, axis=1)

    def element_values(self) -> np.ndarray:
        """Interpolant at element barycenters, shape (ne, N)."""
        return self.values[self.mesh.simplices].mean(axis=1)


def sample(mesh: Mesh, fn) -> VectorField:
    """Evaluate ``fn`` on the (nv, n) vertex array and wrap the result."""
    return VectorField(mesh, np.asarray(fn(mesh.vertices), dtype=float))


def gradient(u: VectorField, elements: np.ndarray | None = None) -> np.ndarray:
    """Element gradients of the interpolant, shape (ne, N, n)."""
    mesh = u.mesh
    simp = mesh.simplices if elements is None else mesh.simplices[elements]
    grads = mesh.shape_gradients if elements is None else mesh.shape_gradients[elements]
    return np.einsum("eaN,ean->eNn", u.values[simp], grads)


def scalar_gradient(mesh: Mesh, values: np.ndarray, elements: np.ndarray | None = None) -> np.ndarray:
    """Element gradients of a scalar nodal array, shape (ne, n)."""
    simp = mesh.simplices if elements is None else mesh.simplices[elements]
    grads = mesh.shape_gradients if elements is None else mesh.shape_gradients[elements]
    return np.einsum("ea,ean->en", np.asarray(values, dtype=float)[simp], grads)


def mean_value(u: VectorField, elements: np.ndarray) -> np.ndarray:
    """Volume-weighted mean of the interpolant over ``elements``."""
    elements = np.asarray(elements)
    if elements.size == 0:
        raise ValueError("mean over an empty element subset")
    vol = u.mesh.volumes[elements]
    vals = u.values[u.mesh.simplices[elements]].mean(axis=1)
    return vol @ vals / vol.sum()


def boundary_mean(u: VectorField, faces: np.ndarray) -> np.ndarray:
    """Area-weighted mean of the trace over the given boundary faces."""
    faces = np.asarray(faces)
    if faces.size == 0:
        raise ValueError("mean over an empty face subset")
    area = u.mesh.face_areas[faces]
    vals = u.values[u.mesh.boundary_faces[faces]].mean(axis=1)
    return area @ vals / area.sum()


def mean_oscillation(u: VectorField, elements: np.ndarray, power: float = 1.0) -> float:
    """``|S|^{-1} ∫_S |u - (u)_S|^power`` with barycenter quadrature."""
    elements = np.asarray(elements)
    vol = u.mesh.volumes[elements]
    vals = u.values[u.mesh.simplices[elements]].mean(axis=1)
    vals = vals - vals[0]  # centred so constant fields give exactly zero
    avg = vol @ vals / vol.sum()
    dev = np.linalg.norm(vals - avg, axis=1) ** power
    return float(vol @ dev / vol.sum())
