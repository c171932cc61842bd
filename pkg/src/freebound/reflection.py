"""Geometric reflection across a flat free boundary ``{x_n = 0}``.

The lower half carries ``σ(ũ)`` where ``ũ`` is the even reflection and
``σ(q) = q/|q|²`` is inversion in the unit sphere. Since ``σ`` fixes the
sphere, the reflected map is continuous across a sphere-valued trace.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .energy import first_variation, p_energy
from .field import VectorField, gradient
from .mesh import Box, HalfBox, Mesh, NodeClass, assemble_mesh


def inversion(q) -> np.ndarray:
    """``σ(q) = q/|q|²``; broadcasts over leading axes."""
    q = np.asarray(q, dtype=float)
    n2 = np.sum(q * q, axis=-1, keepdims=True)
    if np.any(n2 == 0):
        raise ValueError("inversion is undefined at q = 0")
    return q / n2


def inversion_jacobian(q) -> np.ndarray:
    """``Σ_ij(q) = (δ_ij - 2 q_i q_j/|q|²)/|q|²``, shape (..., N, N)."""
    q = np.asarray(q, dtype=float)
    n2 = np.sum(q * q, axis=-1)[..., None, None]
    if np.any(n2 == 0):
        raise ValueError("inversion Jacobian is undefined at q = 0")
    eye = np.eye(q.shape[-1])
    return (eye - 2.0 * q[..., :, None] * q[..., None, :] / n2) / n2


@dataclass(frozen=True, eq=False)
class ReflectedField:
    """Reflection data on the doubled mesh.

    ``image[a]`` is the original node mirrored onto doubled node ``a``;
    ``lower_nodes`` / ``lower_elements`` mark the strict lower half.
    """

    mesh: Mesh
    v: VectorField
    m: np.ndarray
    u_tilde: VectorField
    image: np.ndarray
    lower_nodes: np.ndarray
    lower_elements: np.ndarray

    @property
    def inverse_weight(self) -> np.ndarray:
        return 1.0 / self.m


def _flat_tol(mesh: Mesh) -> float:
    return 1e-9 * max(1.0, float(np.ptp(mesh.vertices, axis=0).max()))


def double_mesh(mesh: Mesh) -> tuple[Mesh, np.ndarray]:
    """Union of ``mesh`` and its mirror image across ``{x_n = 0}``.

    Returns the doubled mesh and the image map (doubled node -> original node).
    Original nodes keep their indices; nodes on the plane are shared.
    """
    tol = _flat_tol(mesh)
    x = mesh.vertices
    if np.any(x[:, -1] < -tol):
        raise ValueError("mesh must lie in {x_n >= 0}")
    free = mesh.node_class == NodeClass.FREE_SPHERE
    if not np.any(free) or np.any(np.abs(x[free, -1]) > tol):
        raise ValueError("reflection needs a non-empty free boundary lying on {x_n = 0}")
    on_plane = np.abs(x[:, -1]) <= tol
    upper = np.flatnonzero(~on_plane)
    nv = mesh.num_nodes
    mirror = np.arange(nv)
    mirror[upper] = nv + np.arange(upper.size)
    mx = x[upper].copy()
    mx[:, -1] *= -1.0
    vertices = np.concatenate([x, mx])
    vertices[np.flatnonzero(on_plane), -1] = 0.0
    simplices = np.concatenate([mesh.simplices, mirror[mesh.simplices]])
    image = np.concatenate([np.arange(nv), upper])

    domain = None
    if isinstance(mesh.domain, HalfBox):
        lo, hi = list(mesh.domain.lower), list(mesh.domain.upper)
        lo[-1] = -hi[-1]
        domain = Box(tuple(lo), tuple(hi))
    doubled = assemble_mesh(vertices, simplices, domain)
    node_class = np.where(doubled.boundary_nodes, NodeClass.DIRICHLET, NodeClass.INTERIOR).astype(np.int8)
    face_class = np.full(len(doubled.boundary_faces), NodeClass.DIRICHLET, dtype=np.int8)
    return replace(doubled, node_class=node_class, face_class=face_class), image


def even_reflect(u: VectorField) -> VectorField:
    """``ũ(x', x_n) = u(x', |x_n|)`` on the doubled mesh."""
    doubled, image = double_mesh(u.mesh)
    return VectorField(doubled, u.values[image], {"image": image})


def reflect_field(u: VectorField, p: float) -> ReflectedField:
    """Build ``v`` (``u`` above, ``σ(ũ)`` below) and the weight ``m``.

    Requires ``|u| > 1/2`` at every node; below that the reflection leaves the
    regime where ``v`` and ``m`` stay bounded.
    """
    norms = u.norms()
    if np.any(norms <= 0.5):
        raise ValueError(f"reflection needs |u| > 1/2 at every node (min {norms.min():.3g})")
    ut = even_reflect(u)
    mesh = ut.mesh
    image = ut.meta["image"]
    lower = np.arange(mesh.num_nodes) >= u.mesh.num_nodes
    vals = np.array(ut.values)
    vals[lower] = inversion(vals[lower])
    m = np.ones(mesh.num_nodes)
    m[lower] = np.linalg.norm(ut.values[lower], axis=1) ** (2.0 * (p - 2.0))
    lower_el = mesh.barycenters[:, -1] < 0
    return ReflectedField(
        mesh=mesh,
        v=VectorField(mesh, vals),
        m=m,
        u_tilde=ut,
        image=image,
        lower_nodes=lower,
        lower_elements=lower_el,
    )


def gradient_identity_check(reflected: ReflectedField, p: float | None = None) -> float:
    """Max relative gap between ``|∇v|`` and ``|∇ũ|/|ũ|²`` over lower elements.

    Elements where both sides vanish count as zero deviation.
    """
    el = np.flatnonzero(reflected.lower_elements)
    if el.size == 0:
        return 0.0
    gv = np.linalg.norm(gradient(reflected.v, el), axis=(1, 2))
    ut = reflected.u_tilde
    gu = np.linalg.norm(gradient(ut, el), axis=(1, 2))
    ub = ut.values[ut.mesh.simplices[el]].mean(axis=1)
    target = gu / np.einsum("ij,ij->i", ub, ub)
    scale = max(float(target.max()), float(gv.max()))
    if scale == 0:
        return 0.0
    tiny = 1e-14 * scale
    dev = np.abs(gv - target)
    rel = np.where(target > tiny, dev / np.maximum(target, tiny), np.where(dev > tiny, np.inf, 0.0))
    return float(rel.max())


@dataclass(frozen=True)
class ReflectedResidual:
    nodes: np.ndarray
    ratios: np.ndarray
    on_plane: np.ndarray


def reflected_residual_bound(reflected: ReflectedField, p: float) -> ReflectedResidual:
    """Per interior node: ``|∫|∇v|^{p-2}∇v·∇φ_a| / ∫_{supp φ_a} |∇v|^p``.

    Ratios are 0 where both numerator and denominator vanish.
    """
    mesh = reflected.mesh
    v = reflected.v
    res = np.linalg.norm(first_variation(v, p, 0.0), axis=1)
    per = p_energy(v, p).per_element
    support = np.zeros(mesh.num_nodes)
    for k in range(mesh.n + 1):
        support += np.bincount(mesh.simplices[:, k], weights=per, minlength=mesh.num_nodes)
    nodes = np.flatnonzero(mesh.node_class == NodeClass.INTERIOR)
    num, den = res[nodes], support[nodes]
    scale = max(float(res.max()), 1e-300)
    tiny = 1e-13 * scale
    ratios = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.where(num > tiny, np.inf, 0.0))
    ratios = np.where(num <= tiny, 0.0, ratios)
    on_plane = np.abs(mesh.vertices[nodes, -1]) <= _flat_tol(mesh)
    return ReflectedResidual(nodes=nodes, ratios=ratios, on_plane=on_plane)
