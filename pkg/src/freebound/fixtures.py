"""Analytic reference fields and quadrature oracles for their energies."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.sparse as sp
from scipy import integrate

from .field import VectorField
from .mesh import Mesh


class FixtureKind(str, Enum):
    CONSTANT = "constant"
    RADIAL_PROJECTION = "radial"
    LOGLOG = "loglog"
    SIN_LOGLOG = "sinloglog"
    LINEAR = "linear"


@dataclass(frozen=True)
class Fixture:
    """One analytic field.

    ``c`` is the value of a Constant fixture, ``A`` the (N, n) matrix of a
    Linear fixture ``u(x) = A (x - center)``. The radial and log-log kinds are
    singular at ``center``.
    """

    kind: FixtureKind
    c: tuple[float, ...] | None = None
    A: tuple[tuple[float, ...], ...] | None = None
    center: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", FixtureKind(self.kind))
        if self.kind is FixtureKind.CONSTANT and self.c is None:
            raise ValueError("constant fixture needs c")
        if self.kind is FixtureKind.LINEAR and self.A is None:
            raise ValueError("linear fixture needs A")

    def _center(self, n: int) -> np.ndarray:
        return np.zeros(n) if self.center is None else np.asarray(self.center, dtype=float)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Point values at ``x`` of shape (k, n); singular points give nan."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = x - self._center(x.shape[1])
        r = np.linalg.norm(y, axis=1)
        kind = self.kind
        if kind is FixtureKind.CONSTANT:
            return np.tile(np.asarray(self.c, dtype=float), (len(x), 1))
        if kind is FixtureKind.LINEAR:
            return y @ np.asarray(self.A, dtype=float).T
        with np.errstate(divide="ignore", invalid="ignore"):
            if kind is FixtureKind.RADIAL_PROJECTION:
                return np.where(r[:, None] > 0, y / r[:, None], np.nan)
            if np.any(r >= 2.0):
                raise ValueError("log log(2/|x|) needs |x - center| < 2 on the whole mesh")
            loglog = np.where(r > 0, np.log(np.log(2.0 / r)), np.nan)
            if kind is FixtureKind.LOGLOG:
                return loglog[:, None]
            return np.sin(loglog)[:, None]

    def gradient_norm(self, x: np.ndarray) -> np.ndarray:
        """``|∇u|`` (Frobenius) of the analytic field at points ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[1]
        r = np.linalg.norm(x - self._center(n), axis=1)
        kind = self.kind
        if kind is FixtureKind.CONSTANT:
            return np.zeros(len(x))
        if kind is FixtureKind.LINEAR:
            return np.full(len(x), np.linalg.norm(np.asarray(self.A, dtype=float)))
        with np.errstate(divide="ignore", invalid="ignore"):
            if kind is FixtureKind.RADIAL_PROJECTION:
                return math.sqrt(n - 1) / r
            dl = 1.0 / (r * np.log(2.0 / r))
            if kind is FixtureKind.LOGLOG:
                return dl
            return np.abs(np.cos(np.log(np.log(2.0 / r)))) * dl

    def log_profile(self, t: float, n: int) -> float:
        """``s |∇u|`` at distance ``s = e^t`` from the center, for the radial kinds."""
        kind = self.kind
        if kind is FixtureKind.RADIAL_PROJECTION:
            return math.sqrt(n - 1)
        if kind not in (FixtureKind.LOGLOG, FixtureKind.SIN_LOGLOG):
            raise ValueError(f"{kind.value} fixture has no radial profile")
        ell = math.log(2.0) - t  # log(2/s)
        out = 1.0 / ell
        return out if kind is FixtureKind.LOGLOG else abs(math.cos(math.log(ell))) * out

    @property
    def radial(self) -> bool:
        return self.kind in (FixtureKind.RADIAL_PROJECTION, FixtureKind.LOGLOG, FixtureKind.SIN_LOGLOG)


def node_neighbors(mesh: Mesh) -> sp.csr_matrix:
    """Node adjacency (shared edge) as a boolean sparse matrix."""
    k = mesh.n + 1
    rows = np.repeat(mesh.simplices, k, axis=1).ravel()
    cols = np.tile(mesh.simplices, (1, k)).ravel()
    adj = sp.coo_matrix((np.ones(len(rows), dtype=bool), (rows, cols)), shape=(mesh.num_nodes,) * 2).tocsr()
    adj.setdiag(False)
    adj.eliminate_zeros()
    return adj


def make_fixture(fixture: Fixture, mesh: Mesh) -> VectorField:
    """Sample ``fixture`` at the mesh nodes.

    A node sitting on the singular point takes the average of its edge
    neighbours; such nodes are listed in ``meta["singular_nodes"]``.
    """
    n = mesh.n
    if fixture.kind is FixtureKind.RADIAL_PROJECTION and fixture.c is not None and len(fixture.c) != n:
        raise ValueError("radial projection requires N = n")
    if fixture.kind is FixtureKind.LINEAR and np.asarray(fixture.A).shape[1] != n:
        raise ValueError(f"linear fixture matrix must have {n} columns")
    if fixture.center is not None and len(fixture.center) != n:
        raise ValueError(f"fixture center must have {n} coordinates")
    vals = fixture.evaluate(mesh.vertices)
    bad = np.flatnonzero(~np.all(np.isfinite(vals), axis=1))
    meta = {"fixture": fixture.kind.value, "singular_nodes": bad.tolist()}
    if bad.size:
        adj = node_neighbors(mesh)
        for a in bad:
            ring = adj.indices[adj.indptr[a] : adj.indptr[a + 1]]
            ring = ring[np.all(np.isfinite(vals[ring]), axis=1)]
            vals[a] = vals[ring].mean(axis=0)
    return VectorField(mesh, vals, meta)


# --------------------------------------------------------------------------
# quadrature oracle
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BallRegion:
    center: tuple[float, ...]
    radius: float


@dataclass(frozen=True)
class AnnulusRegion:
    center: tuple[float, ...]
    inner: float
    outer: float


@dataclass(frozen=True)
class BoxRegion:
    lower: tuple[float, ...]
    upper: tuple[float, ...]


def _sphere_area(n: int) -> float:
    return 2 * math.pi ** (n / 2) / math.gamma(n / 2)


def fixture_energy_oracle(fixture: Fixture, p: float, region, quad_opts: dict | None = None) -> float:
    """``∫_region |∇u|^p`` by adaptive quadrature of the analytic gradient."""
    opts = {"epsabs": 1e-13, "epsrel": 1e-11, "limit": 200}
    opts.update(quad_opts or {})
    if isinstance(region, BoxRegion):
        n = len(region.lower)
        if fixture.kind is FixtureKind.CONSTANT:
            return 0.0
        if fixture.kind is FixtureKind.LINEAR:
            return float(np.linalg.norm(np.asarray(fixture.A, dtype=float)) ** p * np.prod(np.subtract(region.upper, region.lower)))
        f = lambda *x: float(fixture.gradient_norm(np.array(x))[0] ** p)
        ranges = list(zip(region.lower, region.upper))
        val, _ = integrate.nquad(f, ranges, opts={"epsabs": opts["epsabs"], "epsrel": opts["epsrel"], "limit": 100})
        return float(val)

    if isinstance(region, BallRegion):
        center, r0, r1 = region.center, 0.0, region.radius
    elif isinstance(region, AnnulusRegion):
        center, r0, r1 = region.center, region.inner, region.outer
    else:
        raise TypeError(f"unknown region type {type(region).__name__}")
    n = len(center)
    if fixture.kind is FixtureKind.CONSTANT:
        return 0.0
    if fixture.kind is FixtureKind.LINEAR:
        unit = math.pi ** (n / 2) / math.gamma(n / 2 + 1)
        return float(np.linalg.norm(np.asarray(fixture.A, dtype=float)) ** p * unit * (r1**n - r0**n))
    if not np.allclose(fixture._center(n), center):
        raise ValueError("radial regions must be centred at the fixture's singular point")
    area = _sphere_area(n)

    # radial integral in t = log s, written with the scale-free profile s |∇u|
    # so that neither the t -> -inf tail nor the log-log decay loses accuracy
    def integrand(t):
        return fixture.log_profile(t, n) ** p * math.exp((n - p) * t)

    lo = -np.inf if r0 == 0 else math.log(r0)
    val, _ = integrate.quad(integrand, lo, math.log(r1), **opts)
    return float(area * val)
