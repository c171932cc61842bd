"""Simplicial meshes of boxes, half-boxes and half-balls with classified boundaries.

Boxes are split into Kuhn simplices (2 triangles per square, 6 tetrahedra per
cube), so every structured mesh is conforming and non-obtuse. Half-balls are
triangulated with Delaunay over boundary-fitted point clouds.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import Delaunay

DEFAULT_NODE_BUDGET = 3_000_000


class NodeClass(IntEnum):
    INTERIOR = 0
    FREE_SPHERE = 1
    DIRICHLET = 2


class MeshError(ValueError):
    pass


# --------------------------------------------------------------------------
# domain descriptors
# --------------------------------------------------------------------------


def _axis_labels(n: int) -> list[str]:
    return [f"x{k + 1}{s}" for k in range(n) for s in "-+"]


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``[lower, upper]``; faces are labelled ``x1-``, ``x1+``, ..."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if len(lo) != len(hi) or not 1 <= len(lo) <= 3:
            raise MeshError(f"box extents must have matching length 1..3, got {lo}, {hi}")
        if any(b - a <= 0 for a, b in zip(lo, hi)):
            raise MeshError(f"degenerate box extents {lo} .. {hi}")

    @property
    def n(self) -> int:
        return len(self.lower)

    @property
    def face_labels(self) -> list[str]:
        return _axis_labels(self.n)

    @property
    def default_free_boundary(self) -> tuple[str, ...]:
        return ()

    def volume(self) -> float:
        return float(np.prod(np.subtract(self.upper, self.lower)))

    def diameter(self) -> float:
        return float(np.linalg.norm(np.subtract(self.upper, self.lower)))

    def resolve_label(self, label: str) -> str:
        aliases = {"bottom": f"x{self.n}-", "top": f"x{self.n}+"}
        label = aliases.get(label, label)
        if label not in self.face_labels:
            raise MeshError(f"unknown boundary label {label!r} for {type(self).__name__}")
        return label

    def on_face(self, label: str, pts: np.ndarray, tol: float) -> np.ndarray:
        label = self.resolve_label(label)
        axis = int(label[1:-1]) - 1
        bound = self.lower[axis] if label[-1] == "-" else self.upper[axis]
        pts = np.atleast_2d(pts)
        inside = np.all(
            (pts >= np.asarray(self.lower) - tol) & (pts <= np.asarray(self.upper) + tol), axis=1
        )
        return inside & (np.abs(pts[:, axis] - bound) <= tol)

    def contains_ball(self, center, radius: float) -> bool:
        c = np.asarray(center, dtype=float)
        return bool(np.all(c - radius >= self.lower) and np.all(c + radius <= self.upper))


@dataclass(frozen=True)
class HalfBox(Box):
    """Box sitting on ``{x_n = 0}``; the bottom face is the default free boundary."""

    def __post_init__(self):
        super().__post_init__()
        if self.lower[-1] != 0.0:
            raise MeshError("a HalfBox must have lower[-1] == 0 (flat face on {x_n = 0})")

    @property
    def default_free_boundary(self) -> tuple[str, ...]:
        return (f"x{self.n}-",)


@dataclass(frozen=True)
class HalfBall:
    """Upper half ball ``B(0, R) ∩ {x_n ≥ 0}``; faces ``flat`` and ``curved``."""

    radius: float
    dim: int = 2

    def __post_init__(self):
        if not self.radius > 0:
            raise MeshError(f"half-ball radius must be positive, got {self.radius}")
        if self.dim not in (2, 3):
            raise MeshError(f"half-ball dimension must be 2 or 3, got {self.dim}")

    @property
    def n(self) -> int:
        return self.dim

    @property
    def lower(self) -> tuple[float, ...]:
        return (-self.radius,) * (self.dim - 1) + (0.0,)

    @property
    def upper(self) -> tuple[float, ...]:
        return (self.radius,) * self.dim

    @property
    def face_labels(self) -> list[str]:
        return ["flat", "curved"]

    @property
    def default_free_boundary(self) -> tuple[str, ...]:
        return ("flat",)

    def volume(self) -> float:
        return 0.5 * unit_ball_volume(self.dim) * self.radius**self.dim

    def diameter(self) -> float:
        return 2.0 * self.radius

    def resolve_label(self, label: str) -> str:
        label = {"bottom": "flat"}.get(label, label)
        if label not in self.face_labels:
            raise MeshError(f"unknown boundary label {label!r} for HalfBall")
        return label

    def on_face(self, label: str, pts: np.ndarray, tol: float) -> np.ndarray:
        label = self.resolve_label(label)
        pts = np.atleast_2d(pts)
        r = np.linalg.norm(pts, axis=1)
        if label == "flat":
            return (np.abs(pts[:, -1]) <= tol) & (r <= self.radius + tol)
        return (np.abs(r - self.radius) <= tol) & (pts[:, -1] >= -tol)

    def contains_ball(self, center, radius: float) -> bool:
        c = np.asarray(center, dtype=float)
        return bool(np.linalg.norm(c) + radius <= self.radius and c[-1] - radius >= 0.0)


Domain = Box | HalfBall


def unit_ball_volume(n: int) -> float:
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1)


@dataclass(frozen=True)
class ProblemSpec:
    """Exponent, dimensions, domain and boundary assignment of one problem.

    ``dirichlet_data`` maps an ``(k, n)`` array of points to ``(k, N)`` values.
    Faces listed neither in ``free_boundary`` nor in ``natural_boundary`` are
    Dirichlet faces. Natural faces carry no constraint at all.
    """

    p: float
    n: int
    N: int
    domain: Domain
    free_boundary: tuple[str, ...] | None = None
    natural_boundary: tuple[str, ...] = ()
    dirichlet_data: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if not self.p >= 2:
            raise ValueError(f"p must be >= 2, got {self.p}")
        if self.n not in (2, 3) or self.domain.n != self.n:
            raise ValueError(f"n must be 2 or 3 and match the domain, got n={self.n}")
        if self.N < 2:
            raise ValueError(f"target dimension N must be >= 2, got {self.N}")
        free = self.domain.default_free_boundary if self.free_boundary is None else self.free_boundary
        free = tuple(self.domain.resolve_label(s) for s in free)
        natural = tuple(self.domain.resolve_label(s) for s in self.natural_boundary)
        if set(free) & set(natural):
            raise ValueError(f"faces {set(free) & set(natural)} are both free and natural")
        object.__setattr__(self, "free_boundary", free)
        object.__setattr__(self, "natural_boundary", natural)

    @property
    def dirichlet_faces(self) -> tuple[str, ...]:
        used = set(self.free_boundary) | set(self.natural_boundary)
        return tuple(s for s in self.domain.face_labels if s not in used)

    def dirichlet_values(self, pts: np.ndarray) -> np.ndarray:
        if self.dirichlet_data is None:
            raise ValueError("problem has no Dirichlet data")
        vals = np.asarray(self.dirichlet_data(np.atleast_2d(pts)), dtype=float)
        return vals.reshape(len(np.atleast_2d(pts)), self.N)


# --------------------------------------------------------------------------
# the mesh
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray  # (nv, n)
    simplices: np.ndarray  # (ne, n+1), positively oriented
    boundary_faces: np.ndarray  # (nf, n)
    face_normals: np.ndarray  # (nf, n), outward unit normals
    face_labels: np.ndarray  # (nf,) domain face label per boundary face
    node_class: np.ndarray  # (nv,) NodeClass values
    domain: Domain | None = None
    face_class: np.ndarray | None = field(default=None)  # (nf,) NodeClass of each face

    def __post_init__(self):
        for name in ("vertices", "simplices", "boundary_faces", "face_normals", "node_class"):
            arr = getattr(self, name)
            arr.flags.writeable = False

    @property
    def n(self) -> int:
        return self.vertices.shape[1]

    @property
    def num_nodes(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_elements(self) -> int:
        return self.simplices.shape[0]

    @cached_property
    def h(self) -> float:
        """Maximum edge length."""
        best = 0.0
        for a, b in itertools.combinations(range(self.n + 1), 2):
            d = self.vertices[self.simplices[:, a]] - self.vertices[self.simplices[:, b]]
            best = max(best, float(np.sqrt(np.max(np.einsum("ij,ij->i", d, d)))))
        return best

    @cached_property
    def _edge_matrices(self) -> np.ndarray:
        x = self.vertices[self.simplices]
        return np.swapaxes(x[:, 1:, :] - x[:, :1, :], 1, 2)  # columns are edges

    @cached_property
    def signed_volumes(self) -> np.ndarray:
        return np.linalg.det(self._edge_matrices) / math.factorial(self.n)

    @cached_property
    def volumes(self) -> np.ndarray:
        return np.abs(self.signed_volumes)

    @cached_property
    def barycenters(self) -> np.ndarray:
        return self.vertices[self.simplices].mean(axis=1)

    @cached_property
    def shape_gradients(self) -> np.ndarray:
        """Gradients of the barycentric coordinates, shape (ne, n+1, n)."""
        inv = np.linalg.inv(self._edge_matrices)  # rows: grad of lambda_1..lambda_n
        out = np.empty((self.num_elements, self.n + 1, self.n))
        out[:, 1:, :] = inv
        out[:, 0, :] = -inv.sum(axis=1)
        return out

    @cached_property
    def face_areas(self) -> np.ndarray:
        x = self.vertices[self.boundary_faces]
        if self.n == 1:
            return np.ones(len(x))
        if self.n == 2:
            return np.linalg.norm(x[:, 1] - x[:, 0], axis=1)
        return 0.5 * np.linalg.norm(np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]), axis=1)

    @cached_property
    def face_barycenters(self) -> np.ndarray:
        return self.vertices[self.boundary_faces].mean(axis=1)

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        mask = np.zeros(self.num_nodes, dtype=bool)
        mask[self.boundary_faces.ravel()] = True
        return mask

    def nodes_of_class(self, cls: NodeClass) -> np.ndarray:
        return np.flatnonzero(self.node_class == cls)

    def faces_of_class(self, cls: NodeClass) -> np.ndarray:
        if self.face_class is None:
            return np.empty(0, dtype=int)
        return np.flatnonzero(self.face_class == cls)

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @property
    def total_volume(self) -> float:
        return float(self.volumes.sum())


# --------------------------------------------------------------------------
# construction
# --------------------------------------------------------------------------


def _kuhn_simplices(n: int) -> list[list[tuple[int, ...]]]:
    """Vertex offsets (as 0/1 tuples) of the n! Kuhn simplices of the unit cube."""
    out = []
    for perm in itertools.permutations(range(n)):
        corner = [0] * n
        simplex = [tuple(corner)]
        for axis in perm:
            corner[axis] = 1
            simplex.append(tuple(corner))
        out.append(simplex)
    return out


def _structured_box(domain: Box, resolution: float, budget: int):
    n = domain.n
    lo, hi = np.asarray(domain.lower), np.asarray(domain.upper)
    counts = np.maximum(1, np.ceil((hi - lo) / resolution - 1e-9).astype(int))
    shape = tuple(int(c) + 1 for c in counts)
    if math.prod(shape) > budget:
        raise MeshError(f"resolution {resolution} needs {math.prod(shape)} nodes (budget {budget})")
    axes = [np.linspace(lo[k], hi[k], shape[k]) for k in range(n)]
    # snap interior nodes so that shared hyperplanes are bitwise identical
    grids = np.meshgrid(*axes, indexing="ij")
    vertices = np.stack([g.ravel() for g in grids], axis=1)

    cells = np.stack(
        np.meshgrid(*[np.arange(c) for c in counts], indexing="ij"), axis=-1
    ).reshape(-1, n)
    simplices = []
    for offsets in _kuhn_simplices(n):
        idx = [np.ravel_multi_index(tuple((cells + np.asarray(o)).T), shape) for o in offsets]
        simplices.append(np.stack(idx, axis=1))
    simplices = np.concatenate(simplices, axis=0)
    return vertices, simplices


def _half_ball_points(domain: HalfBall, resolution: float, budget: int) -> np.ndarray:
    R, n, h = domain.radius, domain.dim, resolution
    if n == 2:
        m = max(4, int(math.ceil(math.pi * R / h)))
        theta = np.linspace(0.0, math.pi, m + 1)
        arc = R * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        k = max(2, int(math.ceil(2 * R / h)))
        flat = np.stack([np.linspace(-R, R, k + 1)[1:-1], np.zeros(k - 1)], axis=1)
        boundary = np.concatenate([arc, flat])
    else:
        # rim circle, flat disk grid, and latitude rings on the hemisphere
        rings = [np.zeros((0, 3))]
        m_lat = max(2, int(math.ceil(0.5 * math.pi * R / h)))
        for j in range(m_lat + 1):
            phi = 0.5 * math.pi * j / m_lat  # 0 at rim, pi/2 at the pole
            rr = R * math.cos(phi)
            m = max(1, int(math.ceil(2 * math.pi * rr / h))) if rr > 1e-12 else 1
            ang = 2 * math.pi * np.arange(m) / m
            rings.append(
                np.stack([rr * np.cos(ang), rr * np.sin(ang), np.full(m, R * math.sin(phi))], axis=1)
            )
        g = np.arange(-R, R + 0.5 * h, h)
        gx, gy = np.meshgrid(g, g, indexing="ij")
        disk = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
        disk = disk[np.linalg.norm(disk, axis=1) < R - 0.5 * h]
        boundary = np.concatenate(rings + [disk])
    axes = [np.arange(-R, R + 0.5 * h, h)] * (n - 1) + [np.arange(h, R + 0.5 * h, h)]
    grids = np.meshgrid(*axes, indexing="ij")
    interior = np.stack([g.ravel() for g in grids], axis=1)
    r = np.linalg.norm(interior, axis=1)
    interior = interior[(r < R - 0.5 * h) & (interior[:, -1] > 0.5 * h)]
    if n == 3:
        # break the cospherical degeneracy of the lattice without moving boundary nodes
        rng = np.random.default_rng(0)
        interior = interior + rng.uniform(-0.05 * h, 0.05 * h, size=interior.shape)
    pts = np.concatenate([boundary, interior])
    if len(pts) > budget:
        raise MeshError(f"resolution {resolution} needs {len(pts)} nodes (budget {budget})")
    return pts


def _boundary_faces(simplices: np.ndarray, n: int):
    """Faces owned by exactly one simplex, with the index of the opposite vertex."""
    faces, owners, opposite = [], [], []
    for skip in range(n + 1):
        keep = [k for k in range(n + 1) if k != skip]
        faces.append(simplices[:, keep])
        owners.append(np.arange(len(simplices)))
        opposite.append(simplices[:, skip])
    faces = np.concatenate(faces)
    owners = np.concatenate(owners)
    opposite = np.concatenate(opposite)
    key = np.sort(faces, axis=1)
    nv = int(simplices.max()) + 1
    if float(nv) ** n < 2.0**62:
        scalar = np.zeros(len(key), dtype=np.int64)
        for k in range(n):
            scalar = scalar * nv + key[:, k]
        order = np.argsort(scalar, kind="stable")
        s = scalar[order]
        dup = np.zeros(len(s), dtype=bool)
        same = s[1:] == s[:-1]
        dup[1:] |= same
        dup[:-1] |= same
        single = np.empty(len(s), dtype=bool)
        single[order] = ~dup
    else:
        _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        single = counts[inverse.ravel()] == 1
    return faces[single], opposite[single]


def _face_normals(vertices: np.ndarray, faces: np.ndarray, opposite: np.ndarray) -> np.ndarray:
    n = vertices.shape[1]
    x = vertices[faces]
    if n == 1:
        normal = np.ones((len(faces), 1))
    elif n == 2:
        t = x[:, 1] - x[:, 0]
        normal = np.stack([t[:, 1], -t[:, 0]], axis=1)
    else:
        normal = np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0])
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    inward = vertices[opposite] - x[:, 0]
    flip = np.einsum("ij,ij->i", normal, inward) > 0
    normal[flip] *= -1
    return normal


def _label_faces(domain: Domain, vertices: np.ndarray, faces: np.ndarray, tol: float) -> np.ndarray:
    labels = np.full(len(faces), "", dtype=object)
    for label in domain.face_labels:
        on_all = np.all(
            domain.on_face(label, vertices[faces.ravel()], tol).reshape(faces.shape), axis=1
        )
        labels[(labels == "") & on_all] = label
    if isinstance(domain, HalfBall):
        labels[labels == ""] = "curved"
    if np.any(labels == ""):
        raise MeshError("boundary face not attributable to any domain face")
    return labels


def assemble_mesh(vertices: np.ndarray, simplices: np.ndarray, domain: Domain | None = None) -> Mesh:
    """Orient simplices, extract boundary faces and label them.

    Without a domain every boundary face is labelled ``boundary``. Nodes are
    left unclassified (all interior).
    """
    vertices = np.asarray(vertices, dtype=float)
    simplices = np.array(simplices, dtype=np.int64)
    n = vertices.shape[1]
    vol = np.linalg.det(
        np.swapaxes(vertices[simplices[:, 1:]] - vertices[simplices[:, :1]], 1, 2)
    )
    if np.any(vol == 0):
        raise MeshError("degenerate simplex with zero volume")
    neg = vol < 0
    simplices[neg, -2:] = simplices[neg, -1:-3:-1]
    faces, opposite = _boundary_faces(simplices, n)
    normals = _face_normals(vertices, faces, opposite)
    if domain is None:
        labels = np.full(len(faces), "boundary", dtype=object)
    else:
        labels = _label_faces(domain, vertices, faces, tol=1e-9 * domain.diameter())
    return Mesh(
        vertices=vertices,
        simplices=simplices,
        boundary_faces=faces,
        face_normals=normals,
        face_labels=labels,
        node_class=np.zeros(len(vertices), dtype=np.int8),
        domain=domain,
    )


def build_mesh(
    domain: Domain,
    resolution: float,
    *,
    free_boundary: Sequence[str] | None = None,
    natural_boundary: Sequence[str] = (),
    max_nodes: int = DEFAULT_NODE_BUDGET,
) -> Mesh:
    """Mesh ``domain`` with target spacing ``resolution``.

    Boxes get a structured grid with ``ceil(extent / resolution)`` cells per
    axis; the flat part of a half-domain lies exactly on ``{x_n = 0}``. The
    returned mesh is already classified against the given boundary portions
    (default: the domain's flat face is free, everything else Dirichlet).
    """
    if not resolution > 0:
        raise MeshError(f"resolution must be positive, got {resolution}")
    n = domain.n
    if isinstance(domain, Box):
        vertices, simplices = _structured_box(domain, resolution, max_nodes)
    else:
        vertices = _half_ball_points(domain, resolution, max_nodes)
        simplices = Delaunay(vertices).simplices.astype(np.int64)

    if isinstance(domain, HalfBall):
        vol = np.linalg.det(
            np.swapaxes(vertices[simplices[:, 1:]] - vertices[simplices[:, :1]], 1, 2)
        )
        simplices = simplices[np.abs(vol) > 1e-10 * resolution**n]
    mesh = assemble_mesh(vertices, simplices, domain)
    free = domain.default_free_boundary if free_boundary is None else tuple(free_boundary)
    node_class, face_class = _classify(mesh, free, tuple(natural_boundary))
    return replace(mesh, node_class=node_class, face_class=face_class)


def mesh_for(spec: ProblemSpec, resolution: float, **kwargs) -> Mesh:
    return build_mesh(
        spec.domain,
        resolution,
        free_boundary=spec.free_boundary,
        natural_boundary=spec.natural_boundary,
        **kwargs,
    )


def _classify(mesh: Mesh, free: tuple[str, ...], natural: tuple[str, ...]):
    domain = mesh.domain
    free = tuple(domain.resolve_label(s) for s in free)
    natural = tuple(domain.resolve_label(s) for s in natural)
    face_class = np.full(len(mesh.boundary_faces), NodeClass.DIRICHLET, dtype=np.int8)
    face_class[np.isin(mesh.face_labels, free)] = NodeClass.FREE_SPHERE
    face_class[np.isin(mesh.face_labels, natural)] = NodeClass.INTERIOR

    node_class = np.full(mesh.num_nodes, NodeClass.INTERIOR, dtype=np.int8)
    for cls in (NodeClass.FREE_SPHERE, NodeClass.DIRICHLET):  # Dirichlet wins on shared nodes
        node_class[mesh.boundary_faces[face_class == cls].ravel()] = cls

    tol = mesh.h / 10
    bnodes = np.flatnonzero(mesh.boundary_nodes)
    pts = mesh.vertices[bnodes]
    matched = np.zeros(len(bnodes), dtype=bool)
    for label in domain.face_labels:
        matched |= domain.on_face(label, pts, tol)
    if not matched.all():
        raise MeshError(f"{np.count_nonzero(~matched)} boundary nodes match no boundary portion")
    free_nodes = np.flatnonzero(node_class == NodeClass.FREE_SPHERE)
    on_free = np.zeros(len(free_nodes), dtype=bool)
    for label in free:
        on_free |= domain.on_face(label, mesh.vertices[free_nodes], tol)
    if not on_free.all():
        raise MeshError("free-sphere node off the designated free boundary")
    return node_class, face_class


def classify_boundary(mesh: Mesh, spec: ProblemSpec) -> np.ndarray:
    """Per-node classification (``NodeClass`` values) of ``mesh`` under ``spec``."""
    if mesh.domain is None:
        raise MeshError("mesh carries no domain descriptor")
    node_class, _ = _classify(mesh, spec.free_boundary, spec.natural_boundary)
    return node_class


def reclassify(mesh: Mesh, spec: ProblemSpec) -> Mesh:
    node_class, face_class = _classify(mesh, spec.free_boundary, spec.natural_boundary)
    return replace(mesh, node_class=node_class, face_class=face_class)


def ball_elements(mesh: Mesh, x0, r: float) -> np.ndarray:
    """Indices of simplices whose barycenter lies in the open ball ``B(x0, r)``."""
    if not r > 0:
        raise ValueError(f"radius must be positive, got {r}")
    d = mesh.barycenters - np.asarray(x0, dtype=float)
    return np.flatnonzero(np.einsum("ij,ij->i", d, d) < r * r)


def ball_faces(mesh: Mesh, x0, r: float, faces: np.ndarray | None = None) -> np.ndarray:
    """Boundary faces (optionally within ``faces``) whose barycenter lies in ``B(x0, r)``."""
    idx = np.arange(len(mesh.boundary_faces)) if faces is None else np.asarray(faces)
    d = mesh.face_barycenters[idx] - np.asarray(x0, dtype=float)
    return idx[np.einsum("ij,ij->i", d, d) < r * r]
