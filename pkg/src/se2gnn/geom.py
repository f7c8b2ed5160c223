"""2D geometry kernels: rotations, edge geometry, radial basis, graphs, sampling.

Everything in this module is plain numpy and non-differentiable; gradients never
flow through geometry. Angles are radians on the branch (-pi, pi]. All functions
are pure (seeds explicit), so they are safe to call from worker processes.

Sign convention used throughout: the angle attached to a vector is the *negated*
atan2 of that vector, so applying ``rotation_matrix(theta)`` maps the vector onto
the positive x-axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    """Base class for geometry failures."""


class DegenerateEdgeError(GeometryError):
    """An edge connects two (near-)coincident nodes."""


class TriangulationError(GeometryError):
    """Delaunay triangulation is undefined for the given points."""


# --------------------------------------------------------------------------
# rotations and angles
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Rot2:
    """A 2D rotation stored as (cos, sin)."""

    cos: float
    sin: float

    def matrix(self) -> np.ndarray:
        c, s = self.cos, self.sin
        return np.array([[c, -s], [s, c]], dtype=np.float64)

    def apply(self, vec) -> np.ndarray:
        vec = np.asarray(vec, dtype=np.float64)
        x, y = vec[..., 0], vec[..., 1]
        return np.stack([self.cos * x - self.sin * y,
                         self.sin * x + self.cos * y], axis=-1)

    def apply_inverse(self, vec) -> np.ndarray:
        vec = np.asarray(vec, dtype=np.float64)
        x, y = vec[..., 0], vec[..., 1]
        return np.stack([self.cos * x + self.sin * y,
                         -self.sin * x + self.cos * y], axis=-1)


def rotation_matrix(theta: float) -> Rot2:
    """Rotation by ``theta`` radians (counterclockwise)."""
    if not np.isfinite(theta):
        raise GeometryError(f"rotation_matrix: theta must be finite, got {theta!r}")
    return Rot2(cos=float(np.cos(theta)), sin=float(np.sin(theta)))


def _neg_atan2(y, x):
    """-atan2(y, x) standardized to the branch (-pi, pi]."""
    a = -np.arctan2(y, x)
    # numpy returns atan2 in [-pi, pi]; fold the closed -pi endpoint onto +pi.
    return np.where(a <= -np.pi, np.pi, a)


def center_of_mass_zero(positions: np.ndarray) -> np.ndarray:
    """Shift positions so their mean is the zero vector."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[1] != 2 or positions.shape[0] < 1:
        raise GeometryError(f"center_of_mass_zero: expected N x 2 positions, got {positions.shape}")
    return positions - positions.mean(axis=0, keepdims=True)


def global_angles(centered_positions: np.ndarray) -> np.ndarray:
    """Per-node alignment angle alpha_i = -atan2 of the centered position.

    Nodes closer than 1e-9 to the origin get alpha = 0 by convention.
    """
    pos = np.asarray(centered_positions, dtype=np.float64)
    norms = np.linalg.norm(pos, axis=1)
    alpha = _neg_atan2(pos[:, 1], pos[:, 0])
    return np.where(norms < 1e-9, 0.0, alpha)


# --------------------------------------------------------------------------
# edge geometry
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EdgeGeometry:
    """Relative geometry of one directed edge (i, j): node j seen from node i."""

    i: int
    j: int
    rel_vec: np.ndarray   # r_j - r_i
    dist: float
    unit_vec: np.ndarray
    theta: float          # -atan2(unit_vec.y, unit_vec.x)


def edge_arrays(positions: np.ndarray, edges: np.ndarray):
    """Vectorized edge geometry: (rel, dist, unit, theta) arrays, one row per edge.

    ``edges`` holds ordered (i, j) index pairs; rel = r_j - r_i.
    """
    positions = np.asarray(positions, dtype=np.float64)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    n = positions.shape[0]
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise GeometryError(f"edge_arrays: edge index out of range for {n} nodes")
    rel = positions[edges[:, 1]] - positions[edges[:, 0]]
    dist = np.linalg.norm(rel, axis=1)
    bad = np.nonzero(dist < 1e-12)[0]
    if bad.size:
        i, j = edges[bad[0]]
        raise DegenerateEdgeError(f"edge ({i}, {j}) connects coincident nodes (dist < 1e-12)")
    unit = rel / dist[:, None]
    theta = _neg_atan2(unit[:, 1], unit[:, 0])
    return rel, dist, unit, theta


def edge_geometry(positions: np.ndarray, edges) -> list[EdgeGeometry]:
    """Per-edge geometry records for ordered (i, j) pairs."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    rel, dist, unit, theta = edge_arrays(positions, edges)
    return [
        EdgeGeometry(i=int(e[0]), j=int(e[1]), rel_vec=rel[k], dist=float(dist[k]),
                     unit_vec=unit[k], theta=float(theta[k]))
        for k, e in enumerate(edges)
    ]


# --------------------------------------------------------------------------
# radial basis
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RadialBasisConfig:
    n_base: int
    cutoff: float

    def __post_init__(self):
        if self.n_base < 1:
            raise GeometryError(f"RadialBasisConfig: n_base must be >= 1, got {self.n_base}")
        if not self.cutoff > 0:
            raise GeometryError(f"RadialBasisConfig: cutoff must be > 0, got {self.cutoff}")


def bessel_basis(dist, cfg: RadialBasisConfig) -> np.ndarray:
    """Sine-over-r radial basis b_n(r) = sqrt(2/c) sin(n pi r / c) / r, n = 1..n_base.

    ``dist`` may be a scalar or an array; the basis index is appended as the last
    axis. Distances are clamped to >= 1e-6 before evaluation; values beyond the
    cutoff are evaluated as-is (no hard mask).
    """
    r = np.maximum(np.asarray(dist, dtype=np.float64), 1e-6)
    n = np.arange(1, cfg.n_base + 1, dtype=np.float64)
    arg = r[..., None] * (n * np.pi / cfg.cutoff)
    return np.sqrt(2.0 / cfg.cutoff) * np.sin(arg) / r[..., None]


def suggest_cutoff(dist: np.ndarray) -> float:
    """Default basis cutoff: the 99th percentile of observed edge lengths."""
    return float(np.percentile(np.asarray(dist, dtype=np.float64), 99.0))


# --------------------------------------------------------------------------
# Delaunay triangulation (Bowyer-Watson)
# --------------------------------------------------------------------------

def delaunay(points: np.ndarray) -> np.ndarray:
    """Delaunay edges of a 2D point set via incremental Bowyer-Watson insertion.

    Returns a deduplicated undirected edge list as an (E, 2) int array with
    i < j, sorted lexicographically. Points are inserted in lexicographic
    order and cocircular points count as inside the circumcircle, which makes
    the output independent of the input ordering.
    """
    tris = delaunay_triangles(points)
    edges = set()
    for a, b, c in tris:
        for e in ((a, b), (b, c), (c, a)):
            edges.add((min(e), max(e)))
    return np.array(sorted(edges), dtype=np.int64)


def delaunay_triangles(points: np.ndarray) -> np.ndarray:
    """The triangle faces behind :func:`delaunay`, as a (T, 3) index array."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise TriangulationError(f"delaunay: expected N x 2 points, got {pts.shape}")
    n = pts.shape[0]
    if n < 3:
        raise TriangulationError(f"delaunay: need at least 3 points, got {n}")

    # Collinearity check: rank of centered points.
    centered = pts - pts.mean(axis=0)
    if np.linalg.matrix_rank(centered, tol=1e-9 * max(1.0, np.abs(centered).max())) < 2:
        raise TriangulationError("delaunay: all input points are collinear")

    order = np.lexsort((pts[:, 1], pts[:, 0]))

    # Super-triangle comfortably containing every point.
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = max(float((hi - lo).max()), 1e-6)
    cx, cy = (lo + hi) / 2.0
    m = 20.0 * span
    sup = np.array([[cx - 2 * m, cy - m], [cx + 2 * m, cy - m], [cx, cy + 2 * m]])
    verts = np.vstack([pts, sup])
    s0, s1, s2 = n, n + 1, n + 2

    tris: list[tuple[int, int, int]] = [(s0, s1, s2)]
    centers = [_circumcircle(verts, (s0, s1, s2))]

    for p in order:
        px, py = verts[p]
        cc = np.asarray(centers)
        d2 = (cc[:, 0] - px) ** 2 + (cc[:, 1] - py) ** 2
        # cocircular (within tolerance) counts as inside, for determinism
        bad_mask = d2 <= cc[:, 2] * (1.0 + 1e-9) + 1e-12
        bad_idx = np.nonzero(bad_mask)[0]

        # Boundary of the bad-triangle cavity: edges that appear exactly once.
        edge_count: dict[tuple[int, int], int] = {}
        for t in bad_idx:
            a, b, c = tris[t]
            for e in ((a, b), (b, c), (c, a)):
                key = (e[0], e[1]) if e[0] < e[1] else (e[1], e[0])
                edge_count[key] = edge_count.get(key, 0) + 1
        boundary = [e for e, cnt in edge_count.items() if cnt == 1]

        keep = [k for k in range(len(tris)) if not bad_mask[k]]
        tris = [tris[k] for k in keep]
        centers = [centers[k] for k in keep]
        for a, b in boundary:
            t = (a, b, p)
            tris.append(t)
            centers.append(_circumcircle(verts, t))

    real = sorted(tuple(sorted(t)) for t in tris if max(t) < n)
    if not real:
        raise TriangulationError("delaunay: no triangles survive (degenerate input)")
    return np.array(real, dtype=np.int64)


def _circumcircle(verts: np.ndarray, tri) -> tuple[float, float, float]:
    """(center_x, center_y, radius^2) of a triangle's circumcircle."""
    ax, ay = verts[tri[0]]
    bx, by = verts[tri[1]]
    cx, cy = verts[tri[2]]
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    if abs(d) < 1e-300:
        # Degenerate sliver: an empty circle that never captures points.
        return (0.0, 0.0, -np.inf)
    a2, b2, c2 = ax * ax + ay * ay, bx * bx + by * by, cx * cx + cy * cy
    ux = (a2 * (by - cy) + b2 * (cy - ay) + c2 * (ay - by)) / d
    uy = (a2 * (cx - bx) + b2 * (ax - cx) + c2 * (bx - ax)) / d
    r2 = (ax - ux) ** 2 + (ay - uy) ** 2
    return (float(ux), float(uy), float(r2))


def undirected_to_directed(edges: np.ndarray) -> np.ndarray:
    """Expand undirected (i, j) pairs into both directed orientations."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    return np.vstack([e, e[:, ::-1]])


# --------------------------------------------------------------------------
# furthest point sampling
# --------------------------------------------------------------------------

def furthest_point_sampling(points: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Greedy max-min subsampling of ``k`` point indices.

    The first index is drawn uniformly from the seeded generator; every later
    index maximizes the minimum distance to the already-chosen set (first
    maximizer wins ties, so the result is deterministic given the seed).
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise GeometryError(f"furthest_point_sampling: k={k} out of range for {n} points")
    rng = np.random.default_rng(seed)
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    min_d2 = ((pts - pts[chosen[0]]) ** 2).sum(axis=1)
    for t in range(1, k):
        chosen[t] = int(np.argmax(min_d2))
        d2 = ((pts - pts[chosen[t]]) ** 2).sum(axis=1)
        min_d2 = np.minimum(min_d2, d2)
    return chosen


# --------------------------------------------------------------------------
# graphs
# --------------------------------------------------------------------------

@dataclass
class Graph2D:
    """A node graph with centered positions and per-node alignment angles.

    ``edges`` holds ordered (i, j) pairs where i is the receiving node and j the
    neighbor; both orientations are present. ``boundary_normals`` are outward
    unit normals for boundary-adjacent nodes and zero elsewhere.
    """

    positions: np.ndarray        # N x 2, center of mass at the origin
    edges: np.ndarray            # E x 2 directed pairs (dst, src)
    global_angles: np.ndarray    # N alignment angles alpha_i
    boundary_normals: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.global_angles = np.asarray(self.global_angles, dtype=np.float64)
        if self.boundary_normals is None:
            self.boundary_normals = np.zeros_like(self.positions)
        else:
            self.boundary_normals = np.asarray(self.boundary_normals, dtype=np.float64)

    @property
    def n_nodes(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def build(cls, positions, edges, boundary_normals=None) -> "Graph2D":
        """Center positions, derive alignment angles, and wrap into a graph."""
        centered = center_of_mass_zero(positions)
        return cls(positions=centered, edges=edges,
                   global_angles=global_angles(centered),
                   boundary_normals=boundary_normals)

    @classmethod
    def from_delaunay(cls, positions, boundary_normals=None) -> "Graph2D":
        directed = undirected_to_directed(delaunay(positions))
        return cls.build(positions, directed, boundary_normals)

    @classmethod
    def complete(cls, positions, boundary_normals=None) -> "Graph2D":
        """Complete directed graph on the given nodes (used for tiny graphs)."""
        n = np.asarray(positions).shape[0]
        pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
        return cls.build(positions, np.array(pairs, dtype=np.int64), boundary_normals)
