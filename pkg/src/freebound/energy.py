"""p-energy, its regularization, and the weak-form residuals built on it.

All integrands are functions of the element-constant gradient, so every
integral here is a plain per-element sum ``Σ_e vol_e f(∇u|_e)``. Zeroth-order
factors (``u`` inside Ω_ij, radial weights) are taken at element barycenters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .field import VectorField, gradient, scalar_gradient
from .mesh import Mesh, NodeClass


@dataclass(frozen=True)
class EnergyValue:
    total: float
    per_element: np.ndarray

    def __float__(self) -> float:
        return self.total


def _frob2(G: np.ndarray) -> np.ndarray:
    return np.einsum("eij,eij->e", G, G)


def _region(mesh: Mesh, region) -> np.ndarray | slice:
    return slice(None) if region is None else np.asarray(region)


def _energy(vol: np.ndarray, G: np.ndarray, p: float, eps: float) -> EnergyValue:
    per = vol * (eps + _frob2(G)) ** (0.5 * p)
    return EnergyValue(float(np.sum(per)), per)


def p_energy(u: VectorField, p: float, region=None) -> EnergyValue:
    """``Σ_e |∇u_e|^p vol_e`` over ``region`` (element indices; default all)."""
    if p < 2:
        raise ValueError(f"p must be >= 2, got {p}")
    idx = _region(u.mesh, region)
    G = gradient(u, None if region is None else idx)
    return _energy(u.mesh.volumes[idx], G, p, 0.0)


def regularized_energy(u: VectorField, p: float, eps: float, region=None) -> EnergyValue:
    """``Σ_e (eps + |∇u_e|^2)^{p/2} vol_e``; equals :func:`p_energy` at ``eps = 0``."""
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    idx = _region(u.mesh, region)
    G = gradient(u, None if region is None else idx)
    return _energy(u.mesh.volumes[idx], G, p, eps)


def energy_difference(vol: np.ndarray, G: np.ndarray, dG: np.ndarray, p: float, eps: float) -> float:
    """``E(G + dG) - E(G)`` for the regularized integrand without cancellation.

    Uses ``a^q - b^q = b^q expm1(q log1p((a - b) / b))`` with ``a - b`` formed
    from ``dG`` directly, so differences far below ``ulp(E)`` are still resolved.
    """
    q = 0.5 * p
    b = eps + _frob2(G)
    delta = 2.0 * np.einsum("eij,eij->e", G, dG) + _frob2(dG)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(b > 0, delta / np.where(b > 0, b, 1.0), 0.0)
        diff = np.where(b > 0, b**q * np.expm1(q * np.log1p(np.maximum(rel, -1.0))), np.maximum(delta, 0.0) ** q)
    return float(np.sum(vol * diff))


def _scatter(mesh: Mesh, contrib: np.ndarray) -> np.ndarray:
    """Sum element-local nodal contributions (ne, n+1, N) into (nv, N)."""
    flat = mesh.simplices.ravel()
    out = np.empty((mesh.num_nodes, contrib.shape[-1]))
    for c in range(contrib.shape[-1]):
        out[:, c] = np.bincount(flat, weights=contrib[..., c].ravel(), minlength=mesh.num_nodes)
    return out


def flux_weights(G: np.ndarray, p: float, eps: float) -> np.ndarray:
    """``(eps + |∇u|^2)^{(p-2)/2}`` per element."""
    return (eps + _frob2(G)) ** (0.5 * (p - 2.0))


def first_variation(u: VectorField, p: float, eps: float) -> np.ndarray:
    """Nodal residual ``r_a = ∫ (eps+|∇u|²)^{(p-2)/2} ∇u · ∇φ_a``, shape (nv, N).

    This is ``1/p`` times the gradient of :func:`regularized_energy` with
    respect to the nodal values.
    """
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    mesh = u.mesh
    G = gradient(u)
    w = flux_weights(G, p, eps) * mesh.volumes
    contrib = np.einsum("e,eNn,ean->eaN", w, G, mesh.shape_gradients)
    return _scatter(mesh, contrib)


def stiffness_matrix(mesh: Mesh, weights: np.ndarray | None = None) -> sp.csr_matrix:
    """Weighted P1 stiffness ``K_ab = Σ_e w_e vol_e ∇φ_a·∇φ_b`` (nv × nv)."""
    w = mesh.volumes if weights is None else mesh.volumes * weights
    dphi = mesh.shape_gradients
    local = np.einsum("e,ean,ebn->eab", w, dphi, dphi)
    k = mesh.n + 1
    rows = np.repeat(mesh.simplices, k, axis=1).ravel()
    cols = np.tile(mesh.simplices, (1, k)).ravel()
    K = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(mesh.num_nodes,) * 2)
    return K.tocsr()


def tangent_project(q, w) -> np.ndarray:
    """``(I - q̂⊗q̂) w`` with ``q̂ = q/|q|``; broadcasts over leading axes."""
    q = np.asarray(q, dtype=float)
    w = np.asarray(w, dtype=float)
    nq = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(nq == 0):
        raise ValueError("tangent projection at q = 0 is undefined")
    qh = q / nq
    return w - np.sum(qh * w, axis=-1, keepdims=True) * qh


def projected_residual(u: VectorField, residual: np.ndarray) -> np.ndarray:
    """Residual with Dirichlet rows zeroed and free-sphere rows tangent-projected."""
    mesh = u.mesh
    out = np.array(residual, dtype=float)
    out[mesh.node_class == NodeClass.DIRICHLET] = 0.0
    free = mesh.node_class == NodeClass.FREE_SPHERE
    if np.any(free):
        out[free] = tangent_project(u.values[free], out[free])
    return out


def omega_field(u: VectorField) -> np.ndarray:
    """``Ω_ij = u^i ∇u^j - u^j ∇u^i`` per element, shape (ne, N, N, n)."""
    ub = u.element_values()
    G = gradient(u)
    a = np.einsum("ei,ejn->eijn", ub, G)
    return a - np.swapaxes(a, 1, 2)


def conservation_residual(u: VectorField, p: float, phi: np.ndarray, i: int, j: int) -> float:
    """``Σ_e vol_e |∇u_e|^{p-2} Ω_ij · ∇φ`` for 0-based target indices ``i != j``.

    ``phi`` is a scalar nodal array and need not vanish on the boundary.
    """
    N = u.N
    if not (0 <= i < N and 0 <= j < N) or i == j:
        raise IndexError(f"component pair ({i}, {j}) out of range for N = {N}")
    mesh = u.mesh
    G = gradient(u)
    ub = u.element_values()
    omega = ub[:, i, None] * G[:, j, :] - ub[:, j, None] * G[:, i, :]
    dphi = scalar_gradient(mesh, phi)
    w = flux_weights(G, p, 0.0) * mesh.volumes
    return float(np.sum(w * np.einsum("en,en->e", omega, dphi)))


def check_inner_variation_field(mesh: Mesh, xi: np.ndarray, tol: float = 1e-12) -> None:
    scale = max(1.0, float(np.max(np.abs(xi))) if xi.size else 1.0)
    if np.any(np.abs(xi[mesh.node_class == NodeClass.DIRICHLET]) > tol * scale):
        raise ValueError("xi must vanish on Dirichlet nodes")
    free_faces = mesh.faces_of_class(NodeClass.FREE_SPHERE)
    if free_faces.size:
        nodes = mesh.boundary_faces[free_faces]
        normal = mesh.face_normals[free_faces]
        normal_part = np.einsum("fkn,fn->fk", xi[nodes], normal)
        if np.any(np.abs(normal_part) > tol * scale):
            raise ValueError("xi must be tangent to the free boundary")


def inner_variation_residual(u: VectorField, p: float, xi: np.ndarray) -> float:
    """Domain-variation pairing ``∫ |∇u|^{p-2}(|∇u|²δ_ij - p ∂_i u·∂_j u) ∂_i ξ^j``."""
    mesh = u.mesh
    xi = np.asarray(xi, dtype=float).reshape(mesh.num_nodes, mesh.n)
    check_inner_variation_field(mesh, xi)
    G = gradient(u)
    g2 = _frob2(G)
    w = g2 ** (0.5 * (p - 2.0))
    gram = np.einsum("eNi,eNj->eij", G, G)
    stress = w[:, None, None] * (g2[:, None, None] * np.eye(mesh.n) - p * gram)
    Dxi = gradient(VectorField(mesh, xi))  # Dxi[e, j, i] = ∂_i ξ^j
    return float(np.sum(mesh.volumes * np.einsum("eij,eji->e", stress, Dxi)))


def residual_record(op: str, params: dict, value: float, h: float) -> dict:
    return {"op": op, "params": params, "value": float(value), "h": float(h)}
