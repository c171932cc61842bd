"""Regularized p-energy minimization with Dirichlet data and a sphere-valued free trace.

The iterate is moved along a descent direction that is tangent to the sphere at
free-boundary nodes and zero at Dirichlet nodes, then the free nodes are
retracted with ``u -> u/|u|``. The default direction is the projected residual
preconditioned by the lagged-diffusivity stiffness
``Σ_e (eps+|∇u_e|²)^{(p-2)/2} vol_e ∇φ_a·∇φ_b``. The step length comes from a
one-point quadratic model of the energy along the retracted path, and Armijo
backtracking guarantees decrease of the regularized energy. ``eps`` is driven
down geometrically between stages.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .energy import (
    energy_difference,
    first_variation,
    flux_weights,
    projected_residual,
    regularized_energy,
    stiffness_matrix,
)
from .field import VectorField, gradient
from .mesh import Mesh, NodeClass, ProblemSpec

log = logging.getLogger(__name__)


class InfeasibleError(ValueError):
    """Initial field violates the Dirichlet data or the sphere constraint."""


class LineSearchError(RuntimeError):
    """Backtracking exhausted without sufficient decrease."""


@dataclass(frozen=True)
class StepRule:
    initial: float = 1.0
    backtrack: float = 0.5
    armijo: float = 1e-4
    max_backtracks: int = 50
    direction: str = "preconditioned"  # or "steepest"
    line_search: str = "exact"  # quadratic-model step, exact for quadratic energies; or "armijo"

    def __post_init__(self):
        if not 0 < self.backtrack < 1 or not 0 < self.armijo < 1:
            raise ValueError("backtracking factor and Armijo constant must lie in (0, 1)")
        if self.direction not in ("preconditioned", "steepest"):
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.line_search not in ("armijo", "exact"):
            raise ValueError(f"unknown line search {self.line_search!r}")


@dataclass(frozen=True)
class SolverConfig:
    """Continuation schedule, line search and stopping rule.

    ``eps0``/``eps_min`` of ``None`` are resolved from the initial field as
    ``mean|∇u|²`` and ``1e-8 mean|∇u|²``. Intermediate ``eps`` stages stop at
    ``stage_tol_factor * grad_tol`` or after ``stage_max_iters`` steps; the last
    stage runs to ``grad_tol``.
    """

    eps0: float | None = None
    eps_decay: float = 0.5
    eps_min: float | None = None
    step_rule: StepRule = field(default_factory=StepRule)
    grad_tol: float = 1e-8
    max_iters: int = 5000
    stage_tol_factor: float = 1e3
    stage_max_iters: int = 25

    def __post_init__(self):
        if not 0 < self.eps_decay < 1:
            raise ValueError("eps_decay must lie in (0, 1)")
        if self.eps_min is not None and self.eps_min < 0:
            raise ValueError("eps_min must be >= 0")
        if self.eps0 is not None and self.eps_min is not None and not self.eps0 > self.eps_min:
            raise ValueError("eps0 must exceed eps_min")
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")

    def schedule(self, p: float, mean_grad2: float) -> list[float]:
        if p == 2:
            return [0.0]
        eps0 = self.eps0 if self.eps0 is not None else (mean_grad2 if mean_grad2 > 0 else 1.0)
        eps_min = self.eps_min if self.eps_min is not None else 1e-8 * mean_grad2
        if not eps0 > eps_min:
            raise ValueError(f"eps0 = {eps0} must exceed eps_min = {eps_min}")
        out = [eps0]
        while out[-1] * self.eps_decay > eps_min:
            out.append(out[-1] * self.eps_decay)
        out.append(eps_min)
        return out


@dataclass
class SolveReport:
    iterations: int = 0
    energy_trace: list[float] = field(default_factory=list)
    eps_trace: list[float] = field(default_factory=list)
    residual_trace: list[float] = field(default_factory=list)
    step_trace: list[float] = field(default_factory=list)
    decrease_trace: list[float] = field(default_factory=list)
    final_residual_norm: float = math.inf
    eps_final: float = 0.0
    converged: bool = False
    stagnated: bool = False
    message: str = ""

    def record(self, energy: float, eps: float, residual: float, step: float, decrease: float = 0.0) -> None:
        # ``decrease`` is the step's energy change from the difference formula; it
        # stays resolvable after the running energy stops changing in float64
        self.energy_trace.append(float(energy))
        self.eps_trace.append(float(eps))
        self.residual_trace.append(float(residual))
        self.step_trace.append(float(step))
        self.decrease_trace.append(float(decrease))

    def to_dict(self) -> dict:
        return asdict(self)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "eps", "energy", "residual_norm", "step", "decrease"])
        for k, row in enumerate(zip(self.eps_trace, self.energy_trace, self.residual_trace, self.step_trace, self.decrease_trace)):
            w.writerow([k, *(repr(float(v)) for v in row)])
        return buf.getvalue()


# --------------------------------------------------------------------------
# feasibility maps
# --------------------------------------------------------------------------


def retract_free_boundary(u: VectorField) -> VectorField:
    """Normalize free-sphere nodal values; all other nodes are untouched."""
    return u.with_values(_retract(u.mesh, u.values))


def _retract(mesh: Mesh, U: np.ndarray) -> np.ndarray:
    free = mesh.node_class == NodeClass.FREE_SPHERE
    if not np.any(free):
        return U
    norms = np.linalg.norm(U[free], axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero value at a free-sphere node; retraction undefined")
    out = np.array(U)
    out[free] = U[free] / norms
    return out


def truncate_to_ball(u: VectorField, M: float) -> VectorField:
    """Replace nodal values with ``|u| > M`` by ``M u/|u|``."""
    if not M > 0:
        raise ValueError(f"M must be positive, got {M}")
    norms = u.norms()
    big = norms > M
    vals = np.array(u.values)
    vals[big] *= (M / norms[big])[:, None]
    return u.with_values(vals)


def check_feasible(u: VectorField, spec: ProblemSpec | None, tol: float = 1e-12) -> None:
    mesh = u.mesh
    dirichlet = mesh.node_class == NodeClass.DIRICHLET
    if spec is not None and spec.dirichlet_data is not None and np.any(dirichlet):
        target = spec.dirichlet_values(mesh.vertices[dirichlet])
        dev = np.max(np.abs(u.values[dirichlet] - target))
        if dev > tol * (1.0 + np.max(np.abs(target))):
            raise InfeasibleError(f"initial field misses the Dirichlet data by {dev:.3e}")
    free = mesh.node_class == NodeClass.FREE_SPHERE
    if np.any(free):
        dev = np.max(np.abs(np.linalg.norm(u.values[free], axis=1) - 1.0))
        if dev > tol:
            raise InfeasibleError(f"initial field leaves the sphere by {dev:.3e} on the free boundary")


def harmonic_extension(mesh: Mesh, spec: ProblemSpec) -> VectorField:
    """Feasible start: discrete Laplace extension of the Dirichlet data, then retraction."""
    dirichlet = np.flatnonzero(mesh.node_class == NodeClass.DIRICHLET)
    if dirichlet.size == 0:
        raise InfeasibleError("harmonic extension needs at least one Dirichlet node")
    K = stiffness_matrix(mesh)
    U = np.zeros((mesh.num_nodes, spec.N))
    U[dirichlet] = spec.dirichlet_values(mesh.vertices[dirichlet])
    rest = np.setdiff1d(np.arange(mesh.num_nodes), dirichlet)
    if rest.size:
        A = K[rest][:, rest].tocsc()
        rhs = -(K[rest][:, dirichlet] @ U[dirichlet])
        U[rest] = np.asarray(spsolve(A, rhs)).reshape(len(rest), spec.N)
    return VectorField(mesh, _retract(mesh, U))


# --------------------------------------------------------------------------
# descent
# --------------------------------------------------------------------------


def _tangent_bases(q: np.ndarray) -> np.ndarray:
    """Orthonormal bases of ``q^⊥`` for each row of ``q``, shape (m, N, N-1)."""
    m, N = q.shape
    qh = q / np.linalg.norm(q, axis=1, keepdims=True)
    k = np.argmax(np.abs(qh), axis=1)
    v = qh.copy()
    v[np.arange(m), k] += np.where(qh[np.arange(m), k] >= 0, 1.0, -1.0)
    H = np.eye(N)[None] - 2.0 * v[:, :, None] * v[:, None, :] / np.einsum("mi,mi->m", v, v)[:, None, None]
    keep = np.arange(N)[None, :] != k[:, None]
    cols = np.swapaxes(H, 1, 2)[keep].reshape(m, N - 1, N)
    return np.swapaxes(cols, 1, 2)


def _admissible_basis(mesh: Mesh, U: np.ndarray) -> sp.csr_matrix:
    """Sparse map from reduced coordinates to admissible nodal displacements."""
    nv, N = U.shape
    cls = mesh.node_class
    free = np.flatnonzero(cls == NodeClass.FREE_SPHERE)
    interior = np.flatnonzero(cls == NodeClass.INTERIOR)
    ncols = np.zeros(nv, dtype=np.int64)
    ncols[interior] = N
    ncols[free] = N - 1
    offset = np.concatenate([[0], np.cumsum(ncols)[:-1]])
    rows = [(interior[:, None] * N + np.arange(N)).ravel()]
    cols = [(offset[interior][:, None] + np.arange(N)).ravel()]
    vals = [np.ones(interior.size * N)]
    if free.size:
        T = _tangent_bases(U[free])  # (m, N, N-1)
        rows.append(np.broadcast_to((free[:, None] * N + np.arange(N))[:, :, None], T.shape).ravel())
        cols.append(np.broadcast_to((offset[free][:, None] + np.arange(N - 1))[:, None, :], T.shape).ravel())
        vals.append(T.ravel())
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nv * N, int(ncols.sum())),
    )


def _column_node_values(mesh: Mesh, N: int, values: np.ndarray) -> np.ndarray:
    """Spread a nodal scalar onto the reduced coordinates of each node."""
    cls = mesh.node_class
    ncols = np.where(cls == NodeClass.INTERIOR, N, np.where(cls == NodeClass.FREE_SPHERE, N - 1, 0))
    return np.repeat(values, ncols)


def _direction(mesh: Mesh, U: np.ndarray, G: np.ndarray, r: np.ndarray, p: float, eps: float, rule: StepRule):
    if rule.direction == "steepest":
        return -projected_residual(VectorField(mesh, U), r)
    N = U.shape[1]
    P = _admissible_basis(mesh, U)
    if P.shape[1] == 0:
        return np.zeros_like(U)
    K = stiffness_matrix(mesh, flux_weights(G, p, eps))
    A = (P.T @ sp.kron(K, sp.identity(N), format="csr") @ P).tocsc()
    diag = A.diagonal()
    free = mesh.node_class == NodeClass.FREE_SPHERE
    if np.any(free):
        # sphere curvature: tangent Hessian picks up -(u·r) on free nodes
        normal_force = np.zeros(U.shape[0])
        normal_force[free] = -np.einsum("ij,ij->i", U[free], r[free])
        per_col = _column_node_values(mesh, N, normal_force)
        per_col = np.maximum(per_col, -0.5 * diag)
        A = A + sp.diags(per_col, format="csc")
        diag = A.diagonal()
    A = A + sp.identity(A.shape[0], format="csc") * (1e-12 * float(np.mean(np.abs(diag))) + 1e-300)
    s = spsolve(A, -(P.T @ r.ravel()))
    return np.asarray(P @ s).reshape(U.shape)


def _line_search(mesh, U, G, d, slope, p, eps, rule):
    vol = mesh.volumes
    t = rule.initial
    if rule.line_search == "exact":
        dG = gradient(VectorField(mesh, _retract(mesh, U + t * d) - U))
        dE1 = energy_difference(vol, G, dG, p, eps)
        curv = dE1 - slope * t
        if curv > 0:
            t = -slope * t * t / (2.0 * curv)
    for _ in range(rule.max_backtracks):
        Unew = _retract(mesh, U + t * d)
        dG = gradient(VectorField(mesh, Unew - U))
        dE = energy_difference(vol, G, dG, p, eps)
        if dE < 0 and dE <= rule.armijo * t * slope:
            return Unew, t, dE
        t *= rule.backtrack
    raise LineSearchError(f"no sufficient decrease after {rule.max_backtracks} backtracks")


def _step(mesh: Mesh, U: np.ndarray, p: float, eps: float, rule: StepRule):
    u = VectorField(mesh, U)
    G = gradient(u)
    r = first_variation(u, p, eps)
    rp = projected_residual(u, r)
    if not np.any(rp):
        return U, 0.0, 0.0
    d = _direction(mesh, U, G, r, p, eps, rule)
    slope = p * float(np.sum(r * d))
    if not slope < 0:
        d = -rp
        slope = -p * float(np.sum(rp * rp))
    return _line_search(mesh, U, G, d, slope, p, eps, rule)


def descent_step(u: VectorField, p: float, eps: float, step_rule: StepRule | None = None):
    """One line-search step followed by retraction; returns ``(field, step_size)``.

    Raises :class:`LineSearchError` when backtracking finds no sufficient decrease.
    """
    rule = step_rule or StepRule()
    if eps < 0 or (eps == 0 and p != 2):
        raise ValueError("descent needs eps > 0 (or eps = 0 with p = 2)")
    Unew, t, _ = _step(u.mesh, np.array(u.values), p, eps, rule)
    return u.with_values(Unew), t


def _eps_switch_difference(vol: np.ndarray, G: np.ndarray, p: float, eps_old: float, eps_new: float) -> float:
    """``E_{eps_new} - E_{eps_old}`` at a fixed field, cancellation-free."""
    q = 0.5 * p
    b = eps_old + np.einsum("eij,eij->e", G, G)
    delta = eps_new - eps_old
    with np.errstate(divide="ignore", invalid="ignore"):
        diff = np.where(b > 0, b**q * np.expm1(q * np.log1p(delta / np.where(b > 0, b, 1.0))), max(eps_new, 0.0) ** q)
    return float(np.sum(vol * diff))


def solve(mesh: Mesh, spec: ProblemSpec, init: VectorField, config: SolverConfig | None = None):
    """Minimize the regularized p-energy from a feasible ``init``.

    Returns ``(field, SolveReport)``. When ``max_iters`` is reached the current
    (lowest-energy) iterate is returned with ``converged = False``.
    """
    config = config or SolverConfig()
    if init.mesh is not mesh:
        raise ValueError("initial field lives on a different mesh")
    check_feasible(init, spec)
    p = spec.p
    vol = mesh.volumes
    G0 = gradient(init)
    mean_g2 = float(vol @ np.einsum("eij,eij->e", G0, G0) / vol.sum())
    schedule = config.schedule(p, mean_g2)

    U = np.array(init.values)
    report = SolveReport()
    energy = regularized_energy(init, p, schedule[0]).total
    res = math.inf
    for stage, eps in enumerate(schedule):
        last = stage == len(schedule) - 1
        if stage > 0:
            G = gradient(VectorField(mesh, U))
            energy += _eps_switch_difference(vol, G, p, schedule[stage - 1], eps)
        u = VectorField(mesh, U)
        res = float(np.linalg.norm(projected_residual(u, first_variation(u, p, eps))))
        report.record(energy, eps, res, 0.0)
        stage_tol = config.grad_tol if last else config.grad_tol * config.stage_tol_factor
        stage_iters = 0
        while res > stage_tol:
            if report.iterations >= config.max_iters:
                report.message = "max_iters exceeded"
                break
            if not last and stage_iters >= config.stage_max_iters:
                break
            try:
                U, t, dE = _step(mesh, U, p, eps, config.step_rule)
            except LineSearchError:
                if last:
                    report.stagnated = True
                    report.message = f"line search stagnated at residual {res:.3e}"
                break
            energy += dE
            report.iterations += 1
            stage_iters += 1
            u = VectorField(mesh, U)
            res = float(np.linalg.norm(projected_residual(u, first_variation(u, p, eps))))
            report.record(energy, eps, res, t, dE)
        log.debug("stage %d eps=%.3e residual=%.3e iters=%d", stage, eps, res, report.iterations)
        if report.message == "max_iters exceeded":
            break

    report.final_residual_norm = res
    report.eps_final = report.eps_trace[-1]
    report.converged = res <= config.grad_tol or (report.stagnated and res < 10 * config.grad_tol)
    if report.converged and not report.message:
        report.message = "converged"
    return VectorField(mesh, U, dict(init.meta)), report
