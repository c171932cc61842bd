"""Regularity diagnostics for discrete maps.

Ball integrals use barycenter membership (see :func:`freebound.mesh.ball_elements`),
so every quantity below is a finite sum over element data computed once per field.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .energy import p_energy
from .field import VectorField, gradient, mean_oscillation
from .mesh import Mesh, NodeClass, ball_elements, unit_ball_volume


@dataclass(frozen=True)
class BallFamily:
    centers: np.ndarray  # (k, n)
    radii: np.ndarray  # strictly decreasing

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.centers, dtype=float))
        r = np.atleast_1d(np.asarray(self.radii, dtype=float))
        if c.size == 0 or r.size == 0:
            raise ValueError("ball family must have at least one center and one radius")
        if np.any(r <= 0) or np.any(np.diff(r) >= 0):
            raise ValueError("radii must be positive and strictly decreasing")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "radii", r)


def dyadic_radii(R: float, levels: int) -> np.ndarray:
    return R * 0.5 ** np.arange(levels + 1)


def default_family(mesh: Mesh, R: float, levels: int = 5, lattice: float | None = None) -> BallFamily:
    """Free-boundary nodes plus an interior lattice of spacing ``lattice`` (default ``R``)."""
    free = mesh.vertices[mesh.node_class == NodeClass.FREE_SPHERE]
    spacing = R if lattice is None else lattice
    lo, hi = mesh.bounding_box()
    axes = [np.arange(a + 0.5 * spacing, b, spacing) for a, b in zip(lo, hi)]
    grid = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1) if all(len(a) for a in axes) else np.zeros((0, mesh.n))
    if grid.size:
        # keep lattice points covered by the mesh
        from scipy.spatial import cKDTree

        d, _ = cKDTree(mesh.barycenters).query(grid)
        grid = grid[d <= mesh.h]
    centers = np.concatenate([free, grid]) if len(free) or len(grid) else mesh.vertices[:1]
    return BallFamily(centers, dyadic_radii(R, levels))


def _element_energy(u: VectorField, p: float) -> np.ndarray:
    return p_energy(u, p).per_element


def _ball_sum(mesh: Mesh, per: np.ndarray, x0, r: float) -> float:
    return float(per[ball_elements(mesh, x0, r)].sum())


def normalized_energy(u: VectorField, p: float, x0, r: float, _per: np.ndarray | None = None) -> float:
    """``r^{p-n} ∫_{B(x0,r)∩D} |∇u|^p``."""
    if not r > 0:
        raise ValueError("radius must be positive")
    per = _element_energy(u, p) if _per is None else _per
    return r ** (p - u.mesh.n) * _ball_sum(u.mesh, per, x0, r)


def normalized_energy_table(u: VectorField, p: float, family: BallFamily, _per: np.ndarray | None = None) -> np.ndarray:
    """Normalized energies for every (center, radius) pair, shape (k, K)."""
    per = _element_energy(u, p) if _per is None else _per
    bary = u.mesh.barycenters
    tree = cKDTree(bary)
    out = np.empty((len(family.centers), len(family.radii)))
    for j, r in enumerate(family.radii):
        # the tree gives a closed-ball superset; keep the open-ball test of ball_elements
        hits = tree.query_ball_point(family.centers, r)
        for i, (c, idx) in enumerate(zip(family.centers, hits)):
            idx = np.sort(np.asarray(idx, dtype=int))  # ascending, as ball_elements sums
            d = bary[idx] - c
            inside = idx[np.einsum("ij,ij->i", d, d) < r * r]
            out[i, j] = r ** (p - u.mesh.n) * float(per[inside].sum())
    return out


def sup_normalized_energy(u: VectorField, p: float, family: BallFamily) -> float:
    return float(normalized_energy_table(u, p, family).max())


@dataclass(frozen=True)
class MonotonicityReport:
    x0: tuple[float, ...]
    rho: float
    r: float
    lhs: float
    rhs: float
    discrepancy: float
    energy: float  # normalized energy on the outer ball, the natural scale

    def to_dict(self) -> dict:
        return asdict(self)


def _is_flat_point(mesh: Mesh, x0: np.ndarray) -> bool:
    tol = 1e-9 * max(1.0, float(np.ptp(mesh.vertices, axis=0).max()))
    return abs(x0[-1]) <= tol and mesh.vertices[:, -1].min() >= -tol


def _ball_inside(mesh: Mesh, x0: np.ndarray, r: float) -> bool:
    if mesh.domain is not None:
        return mesh.domain.contains_ball(x0, r)
    lo, hi = mesh.bounding_box()
    return bool(np.all(x0 - r >= lo) and np.all(x0 + r <= hi))


def monotonicity_check(u: VectorField, p: float, x0, rho: float, r: float) -> MonotonicityReport:
    """Both sides of the monotonicity identity between radii ``rho < r``.

    ``lhs`` is the difference of normalized energies, ``rhs`` the weighted
    annulus integral of ``|∇u|^{p-2} |∂_ν u|²`` with ``ν`` the radial unit
    vector at each barycenter.
    """
    if not 0 < rho < r:
        raise ValueError(f"need 0 < rho < r, got rho={rho}, r={r}")
    mesh = u.mesh
    x0 = np.asarray(x0, dtype=float)
    if not (_is_flat_point(mesh, x0) or _ball_inside(mesh, x0, r)):
        raise ValueError("x0 must lie on {x_n = 0} or B(x0, r) must be interior")
    n = mesh.n
    G = gradient(u)
    g2 = np.einsum("eij,eij->e", G, G)
    per = mesh.volumes * g2 ** (0.5 * p)
    outer = ball_elements(mesh, x0, r)
    inner = ball_elements(mesh, x0, rho)
    e_r = r ** (p - n) * float(per[outer].sum())
    e_rho = rho ** (p - n) * float(per[inner].sum())
    annulus = np.setdiff1d(outer, inner, assume_unique=True)
    d = mesh.barycenters[annulus] - x0
    dist = np.linalg.norm(d, axis=1)
    nu = d / dist[:, None]
    dnu = np.einsum("eNn,en->eN", G[annulus], nu)
    integrand = dist ** (p - n) * g2[annulus] ** (0.5 * (p - 2)) * np.einsum("eN,eN->e", dnu, dnu)
    rhs = p * float(np.sum(mesh.volumes[annulus] * integrand))
    lhs = e_r - e_rho
    return MonotonicityReport(tuple(x0.tolist()), float(rho), float(r), lhs, rhs, abs(lhs - rhs), e_r)


def decay_ratio(
    u: VectorField,
    p: float,
    x0,
    R: float,
    theta: float,
    centers: np.ndarray | None = None,
    levels: int = 5,
) -> float | None:
    """``sup`` of normalized energies over balls inside ``B(x0, θR)`` over the same inside ``B(x0, R)``.

    Without ``centers`` the family is concentric at ``x0`` with dyadic radii.
    Returns ``None`` when the outer supremum vanishes.
    """
    if not 0 < theta < 1:
        raise ValueError("theta must lie in (0, 1)")
    x0 = np.asarray(x0, dtype=float)
    per = _element_energy(u, p)
    pts = x0[None, :] if centers is None else np.atleast_2d(np.asarray(centers, dtype=float))

    def sup_inside(radius: float) -> float:
        best = 0.0
        for rho in dyadic_radii(radius, levels):
            for c in pts:
                if np.linalg.norm(c - x0) + rho <= radius * (1 + 1e-12):
                    best = max(best, normalized_energy(u, p, c, rho, per))
        return best

    outer = sup_inside(R)
    if outer == 0:
        return None
    return sup_inside(theta * R) / outer


@dataclass(frozen=True)
class GrowthReport:
    """Terms of the three Caccioppoli-type growth inequalities at one ball pair.

    ``implied_*`` is ``lhs / rhs`` (``None`` when ``rhs`` vanishes). ``interior``
    records whether ``B(y0, 2r)`` stays inside the domain, i.e. which of the
    two oscillation inequalities applies.
    """

    y0: tuple[float, ...]
    r: float
    lam: float
    mu: float
    lhs: float
    outer_energy: float
    annulus_energy: float
    oscillation: float
    sphere_deviation: float
    rhs_peqn: float
    rhs_pllnbd0: float
    rhs_pllnbd: float
    implied_peqn: float | None
    implied_pllnbd0: float | None
    implied_pllnbd: float | None
    interior: bool

    def to_dict(self) -> dict:
        return asdict(self)


def _check_probe_box(mesh: Mesh, y0: np.ndarray, radius: float) -> None:
    lo, hi = mesh.bounding_box()
    lo = lo.copy()
    if np.any(mesh.node_class == NodeClass.FREE_SPHERE) and _is_flat_point(mesh, np.r_[y0[:-1], 0.0]):
        lo[-1] = -np.inf  # the ball may cross the flat free boundary
    if np.any(y0 - radius < lo - 1e-12) or np.any(y0 + radius > hi + 1e-12):
        raise ValueError("B(y0, 4r) leaves the mesh bounding box")


def growth_probe(u: VectorField, p: float, y0, r: float, lam: float, mu: float) -> GrowthReport:
    if not (lam > 0 and mu > 0 and r > 0):
        raise ValueError("r, lambda and mu must be positive")
    mesh = u.mesh
    y0 = np.asarray(y0, dtype=float)
    _check_probe_box(mesh, y0, 4 * r)
    inner = ball_elements(mesh, y0, r)
    if inner.size == 0:
        raise ValueError("inner ball B(y0, r) contains no elements")
    outer = ball_elements(mesh, y0, 4 * r)
    per = _element_energy(u, p)
    lhs = float(per[inner].sum())
    outer_e = float(per[outer].sum())
    annulus_e = float(per[np.setdiff1d(outer, inner, assume_unique=True)].sum())
    vol = mesh.volumes[outer]
    ub = u.values[mesh.simplices[outer]].mean(axis=1)
    centred = ub - ub[0]
    mean = vol @ centred / vol.sum()
    osc = float(vol @ np.linalg.norm(centred - mean, axis=1) ** p)
    sph = float(vol @ np.abs(np.einsum("ij,ij->i", ub, ub) - 1.0) ** p)
    scale = lam ** (1 - p) * r ** (-p)
    rhs_peqn = (lam + mu ** (p - 1)) * outer_e + annulus_e / mu
    rhs0 = lam * outer_e + scale * osc
    rhs1 = rhs0 + scale * sph

    def ratio(rhs: float) -> float | None:
        return None if rhs == 0 else lhs / rhs

    interior = _ball_inside(mesh, y0, 2 * r)
    return GrowthReport(
        tuple(y0.tolist()), float(r), float(lam), float(mu), lhs, outer_e, annulus_e, osc, sph,
        rhs_peqn, rhs0, rhs1, ratio(rhs_peqn), ratio(rhs0), ratio(rhs1), interior,
    )


def bmo_seminorm(u: VectorField, family: BallFamily, component: int | None = None) -> float:
    """``max`` over the family of the mean oscillation ``|B|^{-1}∫_B |f - (f)_B|``."""
    f = u if component is None else u.component(component)
    best = 0.0
    for c in family.centers:
        for r in family.radii:
            el = ball_elements(f.mesh, c, r)
            if el.size:
                best = max(best, mean_oscillation(f, el))
    return best


def dist_to_sphere_sup(u: VectorField, region=None) -> float:
    """``max | |u| - 1 |`` over ``region`` (node indices or mask; default all nodes)."""
    norms = u.norms() if region is None else u.norms()[np.asarray(region)]
    if norms.size == 0:
        raise ValueError("empty region")
    return float(np.max(np.abs(norms - 1.0)))


@dataclass(frozen=True)
class SingularSetReport:
    eps_threshold: float
    flagged: list[int]  # indices into the family centers
    flagged_points: list[list[float]]
    flagged_count: int
    covering: dict[float, int]  # box side -> number of boxes meeting the flagged set
    hausdorff_proxy: dict[float, float]  # box side -> count * side^(n-p)
    sup_energy: list[float] = field(default_factory=list)  # per center

    def to_dict(self) -> dict:
        d = asdict(self)
        d["covering"] = {repr(k): v for k, v in self.covering.items()}
        d["hausdorff_proxy"] = {repr(k): v for k, v in self.hausdorff_proxy.items()}
        return d


def box_counts(points: np.ndarray, sides, origin: np.ndarray) -> dict[float, int]:
    out = {}
    for s in sides:
        if len(points) == 0:
            out[float(s)] = 0
            continue
        cells = np.floor((points - origin) / s + 1e-12).astype(np.int64)
        out[float(s)] = int(len(np.unique(cells, axis=0)))
    return out


def singular_set(u: VectorField, p: float, eps_threshold: float, R: float, family: BallFamily) -> SingularSetReport:
    """Centers whose sup over radii ``ρ <= R`` of the normalized energy reaches ``eps_threshold``."""
    if not eps_threshold > 0:
        raise ValueError("eps_threshold must be positive")
    radii = family.radii[family.radii <= R * (1 + 1e-12)]
    if radii.size == 0:
        raise ValueError(f"no family radius is <= R = {R}")
    sup = normalized_energy_table(u, p, BallFamily(family.centers, radii)).max(axis=1)
    flagged = np.flatnonzero(sup >= eps_threshold)
    pts = family.centers[flagged]
    origin = u.mesh.bounding_box()[0]
    cover = box_counts(pts, radii, origin)
    n = u.mesh.n
    proxy = {s: c * s ** (n - p) for s, c in cover.items()}
    return SingularSetReport(
        float(eps_threshold), flagged.tolist(), pts.tolist(), int(flagged.size), cover, proxy, sup.tolist()
    )


def hoelder_exponent(u: VectorField, x0, R: float, dyadic_depth: int) -> tuple[float | None, float]:
    """Slope of ``log osc(B(x0, r))`` against ``log r`` over ``r = R 2^{-k}``.

    Returns ``(alpha, rms_fit_residual)``; ``alpha`` is clamped to [0, 1.5] and
    is ``None`` when the oscillation vanishes identically.
    """
    if dyadic_depth < 3:
        raise ValueError("dyadic_depth must be >= 3")
    logs_r, logs_o = [], []
    for r in dyadic_radii(R, dyadic_depth):
        el = ball_elements(u.mesh, x0, r)
        if el.size == 0:
            continue
        osc = mean_oscillation(u, el)
        if osc > 0:
            logs_r.append(math.log(r))
            logs_o.append(math.log(osc))
    if len(logs_r) < 2:
        return None, 0.0
    coef, res, *_ = np.polyfit(logs_r, logs_o, 1, full=True)
    rms = math.sqrt(float(res[0]) / len(logs_r)) if len(res) else 0.0
    return float(np.clip(coef[0], 0.0, 1.5)), rms


def max_principle_check(u: VectorField, tol: float = 1e-8) -> tuple[float, float, bool]:
    """``(interior_sup, boundary_sup, passed)`` for ``max |u|`` over interior vs boundary nodes."""
    norms = u.norms()
    bnd = u.mesh.boundary_nodes
    interior_sup = float(norms[~bnd].max()) if np.any(~bnd) else 0.0
    boundary_sup = float(norms[bnd].max())
    return interior_sup, boundary_sup, interior_sup <= boundary_sup + tol


def linear_normalized_energy(A: np.ndarray, p: float, r: float, n: int) -> float:
    """Closed form ``ω_n ‖A‖^p r^p`` for an interior ball and a constant gradient."""
    return unit_ball_volume(n) * float(np.linalg.norm(A)) ** p * r**p
