"""Ground-truth geometries: planar domains with boundary, smooth metric fields,
boundary-fixing gauge maps, and their wide-stencil discretization."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from matplotlib.path import Path as MplPath
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

__all__ = [
    "Metric",
    "EuclideanMetric",
    "ConstantMetric",
    "ConformalBumpMetric",
    "PullbackMetric",
    "Shape",
    "Disk",
    "Annulus",
    "Dumbbell",
    "PolygonWithHoles",
    "MetricDomain",
    "GaugeMap",
    "identity_gauge",
    "swirl_gauge",
    "bump_gauge",
    "slide_gauge",
    "pullback_domain",
    "Mesh",
    "MeshError",
    "build_mesh",
    "stencil_offsets",
    "scenario_domain",
    "scenario_gauge",
    "SCENARIOS",
]


class MeshError(ValueError):
    """Raised when a domain cannot be discretized into a usable mesh."""


# ---------------------------------------------------------------------------
# metrics


class Metric:
    """A smooth SPD tensor field on the plane, evaluated pointwise.

    Subclasses implement ``tensor(points) -> (n, 2, 2)``.
    """

    name = "metric"
    is_euclidean = False

    def tensor(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return self.tensor(pts)


class EuclideanMetric(Metric):
    name = "euclidean"
    is_euclidean = True

    def tensor(self, points):
        out = np.zeros((len(points), 2, 2))
        out[:, 0, 0] = 1.0
        out[:, 1, 1] = 1.0
        return out


class ConstantMetric(Metric):
    def __init__(self, matrix, name: str | None = None):
        self.matrix = np.asarray(matrix, dtype=float)
        if self.matrix.shape != (2, 2):
            raise ValueError("constant metric needs a 2x2 matrix")
        self.name = name or "constant"

    def tensor(self, points):
        return np.broadcast_to(self.matrix, (len(points), 2, 2)).copy()


def _bump(s: np.ndarray) -> np.ndarray:
    # C-infinity bump: 1 at s=0, identically 0 for s>=1
    out = np.zeros_like(s)
    inside = s < 1.0
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - s[inside] ** 2))
    return out


def _bump_grad(s: np.ndarray) -> np.ndarray:
    """d/ds of ``_bump``."""
    out = np.zeros_like(s)
    inside = s < 1.0
    si = s[inside]
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - si**2)) * (-2.0 * si / (1.0 - si**2) ** 2)
    return out


class ConformalBumpMetric(Metric):
    """g = exp(2u) Id with u a compactly supported smooth bump.

    The support is the open disk of ``radius`` around ``center``; outside it the
    metric is exactly Euclidean, so boundaries away from the bump keep their
    Euclidean arclength.
    """

    def __init__(self, amplitude: float = 0.3, center=(0.15, 0.1), radius: float = 0.6):
        self.amplitude = float(amplitude)
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        self.name = f"conformal-bump(a={self.amplitude:g})"

    def log_factor(self, points: np.ndarray) -> np.ndarray:
        s = np.linalg.norm(points - self.center, axis=1) / self.radius
        return self.amplitude * _bump(s)

    def tensor(self, points):
        f = np.exp(2.0 * self.log_factor(points))
        out = np.zeros((len(points), 2, 2))
        out[:, 0, 0] = f
        out[:, 1, 1] = f
        return out


class PullbackMetric(Metric):
    """g'(p) = J(p)^T g(psi(p)) J(p) for a gauge map psi."""

    def __init__(self, base: Metric, gauge: "GaugeMap"):
        self.base = base
        self.gauge = gauge
        self.name = f"pullback({base.name},{gauge.name})"

    def tensor(self, points):
        jac = self.gauge.jacobian(points)
        g = self.base(self.gauge(points))
        return np.einsum("nki,nkl,nlj->nij", jac, g, jac)


# ---------------------------------------------------------------------------
# shapes


def _polyline_length(loop: np.ndarray) -> float:
    return float(np.linalg.norm(np.roll(loop, -1, axis=0) - loop, axis=1).sum())


class Shape:
    """Closed planar region bounded by one or more closed loops.

    Loops are oriented so the region lies to the left (outer loop CCW,
    holes CW).
    """

    kind = "shape"

    def loops(self, ds: float) -> list[np.ndarray]:
        raise NotImplementedError

    def bounds(self) -> tuple[float, float, float, float]:
        pts = np.vstack(self.loops(1e-2))
        return (*pts.min(axis=0), *pts.max(axis=0))

    @cached_property
    def _dense(self) -> tuple[cKDTree, list[MplPath]]:
        loops = self.loops(2e-4)
        return cKDTree(np.vstack(loops)), [MplPath(lp) for lp in loops]

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        _, paths = self._dense
        inside = np.zeros(len(points), dtype=bool)
        for p in paths:
            inside ^= p.contains_points(points)
        return inside

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        """Distance to the boundary, positive inside."""
        points = np.atleast_2d(points)
        tree, _ = self._dense
        d, _ = tree.query(points)
        return np.where(self.contains(points), d, -d)

    def params(self) -> dict:
        return {}


class Disk(Shape):
    kind = "disk"

    def __init__(self, radius: float = 1.0):
        self.radius = float(radius)

    def loops(self, ds):
        n = max(16, int(math.ceil(2 * math.pi * self.radius / ds)))
        t = 2 * math.pi * np.arange(n) / n
        return [self.radius * np.column_stack([np.cos(t), np.sin(t)])]

    def bounds(self):
        r = self.radius
        return (-r, -r, r, r)

    def contains(self, points):
        return np.linalg.norm(np.atleast_2d(points), axis=1) <= self.radius

    def signed_distance(self, points):
        return self.radius - np.linalg.norm(np.atleast_2d(points), axis=1)

    def params(self):
        return {"radius": self.radius}


class Annulus(Shape):
    kind = "annulus"

    def __init__(self, r_in: float = 0.3, r_out: float = 1.0):
        if not 0 < r_in < r_out:
            raise ValueError("annulus needs 0 < r_in < r_out")
        self.r_in = float(r_in)
        self.r_out = float(r_out)

    def loops(self, ds):
        out = []
        for r, sign in ((self.r_out, 1.0), (self.r_in, -1.0)):
            n = max(16, int(math.ceil(2 * math.pi * r / ds)))
            t = sign * 2 * math.pi * np.arange(n) / n
            out.append(r * np.column_stack([np.cos(t), np.sin(t)]))
        return out

    def bounds(self):
        r = self.r_out
        return (-r, -r, r, r)

    def contains(self, points):
        r = np.linalg.norm(np.atleast_2d(points), axis=1)
        return (r <= self.r_out) & (r >= self.r_in)

    def signed_distance(self, points):
        r = np.linalg.norm(np.atleast_2d(points), axis=1)
        return np.minimum(self.r_out - r, r - self.r_in)

    def params(self):
        return {"r_in": self.r_in, "r_out": self.r_out}


class Dumbbell(Shape):
    """Two disks joined by a straight neck, with circular fillets at the joins.

    The boundary is C^1 and concave along the neck and fillets.
    """

    kind = "dumbbell"

    def __init__(self, lobe_radius=0.5, lobe_offset=0.6, neck_half_width=0.15, fillet=0.1):
        self.R = float(lobe_radius)
        self.c = float(lobe_offset)
        self.w = float(neck_half_width)
        self.rho = float(fillet)
        self.fx = self.c - math.sqrt((self.R + self.rho) ** 2 - (self.w + self.rho) ** 2)
        if not 0 <= self.fx < self.c:
            raise ValueError("dumbbell parameters give overlapping fillets")

    @staticmethod
    def _arc(center, radius, a0, a1, ds):
        n = max(2, int(math.ceil(abs(a1 - a0) * radius / ds)))
        t = np.linspace(a0, a1, n, endpoint=False)
        return np.column_stack([center[0] + radius * np.cos(t), center[1] + radius * np.sin(t)])

    @staticmethod
    def _seg(p0, p1, ds):
        n = max(1, int(math.ceil(math.dist(p0, p1) / ds)))
        t = np.arange(n)[:, None] / n
        return np.asarray(p0) * (1 - t) + np.asarray(p1) * t

    def loops(self, ds):
        R, c, w, rho, fx = self.R, self.c, self.w, self.rho, self.fx
        alpha = math.atan2(w + rho, fx - c)  # tangency angle on the right lobe
        beta = math.atan2(-(w + rho), c - fx)  # lobe direction seen from the fillet
        parts = [
            self._arc((c, 0.0), R, -alpha, alpha, ds),
            self._arc((fx, w + rho), rho, beta, -math.pi / 2, ds),
            self._seg((fx, w), (-fx, w), ds),
            self._arc((-fx, w + rho), rho, -math.pi / 2, -math.pi - beta, ds),
            self._arc((-c, 0.0), R, math.pi - alpha, math.pi + alpha, ds),
            self._arc((-fx, -w - rho), rho, math.pi + beta, math.pi / 2, ds),
            self._seg((-fx, -w), (fx, -w), ds),
            self._arc((fx, -w - rho), rho, math.pi / 2, -beta, ds),
        ]
        return [np.vstack(parts)]

    def bounds(self):
        return (-self.c - self.R, -self.R, self.c + self.R, self.R)

    def params(self):
        return {"lobe_radius": self.R, "lobe_offset": self.c, "neck_half_width": self.w, "fillet": self.rho}


class PolygonWithHoles(Shape):
    kind = "polygon"

    def __init__(self, outer: Sequence, holes: Sequence[Sequence] = ()):
        def oriented(ring, ccw):
            ring = np.asarray(ring, dtype=float)
            area = 0.5 * np.sum(ring[:, 0] * np.roll(ring[:, 1], -1) - np.roll(ring[:, 0], -1) * ring[:, 1])
            return ring if (area > 0) == ccw else ring[::-1]

        self.rings = [oriented(outer, True)] + [oriented(h, False) for h in holes]

    def loops(self, ds):
        out = []
        for ring in self.rings:
            nxt = np.roll(ring, -1, axis=0)
            pieces = []
            for p0, p1 in zip(ring, nxt):
                n = max(1, int(math.ceil(np.linalg.norm(p1 - p0) / ds)))
                t = np.arange(n)[:, None] / n
                pieces.append(p0 * (1 - t) + p1 * t)
            out.append(np.vstack(pieces))
        return out

    def params(self):
        return {"rings": [r.tolist() for r in self.rings]}


@dataclass(frozen=True)
class MetricDomain:
    shape: Shape
    metric: Metric
    name: str = ""

    @property
    def domain_kind(self) -> str:
        return self.shape.kind

    def sample_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform random points of the closed domain (rejection sampling)."""
        x0, y0, x1, y1 = self.shape.bounds()
        out = []
        while sum(len(o) for o in out) < n:
            pts = rng.uniform((x0, y0), (x1, y1), size=(2 * n, 2))
            out.append(pts[self.shape.contains(pts)])
        return np.vstack(out)[:n]

    def sample_boundary(self, n: int, rng: np.random.Generator) -> np.ndarray:
        pts = np.vstack(self.shape.loops(1e-3))
        return pts[rng.choice(len(pts), size=n, replace=len(pts) < n)]

    def min_eigenvalue(self, points: np.ndarray) -> np.ndarray:
        return np.linalg.eigvalsh(self.metric(points))[:, 0]


# ---------------------------------------------------------------------------
# gauges


@dataclass(frozen=True)
class GaugeMap:
    """A diffeomorphism of the closed domain onto itself fixing the boundary.

    ``jacobian`` may be omitted, in which case central differences are used.
    ``inverse`` may be omitted, in which case Newton iteration is used.
    """

    forward: Callable[[np.ndarray], np.ndarray]
    name: str = "gauge"
    analytic_jacobian: Callable[[np.ndarray], np.ndarray] | None = None
    analytic_inverse: Callable[[np.ndarray], np.ndarray] | None = None
    fd_step: float = 1e-6

    def __call__(self, points) -> np.ndarray:
        return self.forward(np.atleast_2d(np.asarray(points, dtype=float)))

    def jacobian(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.analytic_jacobian is not None:
            return self.analytic_jacobian(pts)
        h = self.fd_step
        jac = np.empty((len(pts), 2, 2))
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            jac[:, :, k] = (self.forward(pts + e) - self.forward(pts - e)) / (2 * h)
        return jac

    def inverse(self, points, tol: float = 1e-13, max_iter: int = 50) -> np.ndarray:
        y = np.atleast_2d(np.asarray(points, dtype=float))
        if self.analytic_inverse is not None:
            return self.analytic_inverse(y)
        x = y.copy()
        for _ in range(max_iter):
            r = self.forward(x) - y
            if np.max(np.abs(r)) < tol:
                break
            x = x - np.linalg.solve(self.jacobian(x), r[:, :, None])[:, :, 0]
        return x


def identity_gauge() -> GaugeMap:
    return GaugeMap(
        forward=lambda p: p.copy(),
        name="identity",
        analytic_jacobian=lambda p: np.broadcast_to(np.eye(2), (len(p), 2, 2)).copy(),
        analytic_inverse=lambda p: p.copy(),
    )


def _rotate(points, angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.column_stack([c * points[:, 0] - s * points[:, 1], s * points[:, 0] + c * points[:, 1]])


def swirl_gauge(amplitude: float = 0.5, r_in: float = 0.0, r_out: float = 1.0) -> GaugeMap:
    """Rotation by an angle depending on the radius, vanishing on both circles.

    For ``r_in = 0`` the angle is ``amplitude * (1 - r^2 / r_out^2)``; for an
    annulus it is ``amplitude * sin^2(pi (r - r_in) / (r_out - r_in))``, whose
    radial slope also vanishes on both circles (so g' = g there). The map
    preserves radii and area.
    """
    a, ri, ro = float(amplitude), float(r_in), float(r_out)

    if ri == 0.0:
        def angle_r(r):
            return a * (1.0 - r**2 / ro**2)

        def slope_over_r(r):
            return np.full_like(r, -2.0 * a / ro**2)
    else:
        k = math.pi / (ro - ri)

        def angle_r(r):
            return a * np.sin(k * (r - ri)) ** 2

        def slope_over_r(r):
            return a * k * np.sin(2.0 * k * (r - ri)) / r

    def angle(p):
        return angle_r(np.hypot(p[:, 0], p[:, 1]))

    def forward(p):
        return _rotate(p, angle(p))

    def jac(p):
        r = np.hypot(p[:, 0], p[:, 1])
        al = angle_r(r)
        c, s = np.cos(al), np.sin(al)
        rot = np.empty((len(p), 2, 2))
        rot[:, 0, 0], rot[:, 0, 1], rot[:, 1, 0], rot[:, 1, 1] = c, -s, s, c
        perp = _rotate(np.column_stack([-p[:, 1], p[:, 0]]), al)  # d/d(angle) of R(angle) p
        grad = slope_over_r(r)[:, None] * p
        return rot + perp[:, :, None] * grad[:, None, :]

    def inverse(q):
        return _rotate(q, -angle(q))

    return GaugeMap(forward, name=f"swirl(a={a:g})", analytic_jacobian=jac, analytic_inverse=inverse)


def bump_gauge(shift=(0.08, 0.05), center=(0.0, 0.0), radius: float = 0.5) -> GaugeMap:
    """psi(p) = p + bump(|p - center| / radius) * shift, identity off the bump.

    Bijective when |shift| * max|grad bump| < 1, i.e. |shift| < ~0.5 * radius.
    """
    shift = np.asarray(shift, dtype=float)
    center = np.asarray(center, dtype=float)
    radius = float(radius)
    if np.linalg.norm(shift) * 1.5 / radius >= 1.0:
        raise ValueError("bump gauge shift too large to be invertible")

    def forward(p):
        s = np.linalg.norm(p - center, axis=1) / radius
        return p + _bump(s)[:, None] * shift

    def jac(p):
        d = p - center
        r = np.linalg.norm(d, axis=1)
        s = r / radius
        with np.errstate(invalid="ignore", divide="ignore"):
            ds = np.where(r > 0, 1.0 / (radius * np.maximum(r, 1e-300)), 0.0)[:, None] * d
        grad = _bump_grad(s)[:, None] * ds
        return np.eye(2)[None] + shift[None, :, None] * grad[:, None, :]

    return GaugeMap(forward, name=f"bump({shift[0]:g},{shift[1]:g})", analytic_jacobian=jac)


def slide_gauge(amplitude: float = 0.3, center=(1.0, 0.0), radius: float = 0.5) -> GaugeMap:
    """Rotation about the origin by ``amplitude * bump(|p - center| / radius)``.

    Maps a centred disk onto itself but slides boundary points near
    ``center`` along the circle, so it does NOT fix the boundary: a
    deliberately invalid gauge for negative controls.
    """
    center = np.asarray(center, dtype=float)
    a, radius = float(amplitude), float(radius)

    def forward(p):
        return _rotate(p, a * _bump(np.linalg.norm(p - center, axis=1) / radius))

    return GaugeMap(forward, name=f"slide(a={a:g})")


def pullback_domain(domain: MetricDomain, gauge: GaugeMap, check_points: int = 256,
                    seed: int = 0) -> MetricDomain:
    """Domain with metric J^T g(psi) J; psi is then an isometry onto ``domain``."""
    rng = np.random.default_rng(seed)
    pts = domain.sample_points(check_points, rng)
    det = np.linalg.det(gauge.jacobian(pts))
    if np.any(np.abs(det) < 1e-12):
        raise ValueError("gauge jacobian is singular at a sample point")
    return MetricDomain(domain.shape, PullbackMetric(domain.metric, gauge), name=f"{domain.name}/{gauge.name}")


# ---------------------------------------------------------------------------
# mesh


def stencil_offsets(radius: int) -> np.ndarray:
    """Primitive lattice directions with Chebyshev norm <= radius, one per +-pair."""
    out = []
    for a in range(-radius, radius + 1):
        for b in range(0, radius + 1):
            if b == 0 and a <= 0:
                continue
            if math.gcd(abs(a), b) == 1:
                out.append((a, b))
    return np.array(out, dtype=np.int64)


def _simpson_lengths(metric: Metric, p0: np.ndarray, p1: np.ndarray, chunk: int = 200_000) -> np.ndarray:
    d = p1 - p0
    if metric.is_euclidean:
        return np.linalg.norm(d, axis=1)
    out = np.empty(len(p0))
    weights = np.array([1.0, 4.0, 2.0, 4.0, 1.0]) / 12.0
    for s in range(0, len(p0), chunk):
        a, v = p0[s:s + chunk], d[s:s + chunk]
        acc = np.zeros(len(a))
        for w, t in zip(weights, np.linspace(0.0, 1.0, 5)):
            g = metric(a + t * v)
            acc += w * np.sqrt(np.einsum("ni,nij,nj->n", v, g, v))
        out[s:s + chunk] = acc
    return out


def _metric_arclength(metric: Metric, loop: np.ndarray) -> np.ndarray:
    closed = np.vstack([loop, loop[:1]])
    seg = _simpson_lengths(metric, closed[:-1], closed[1:])
    return np.concatenate([[0.0], np.cumsum(seg)])


@dataclass(eq=False)
class Mesh:
    """Wide-stencil discretization of a metric domain.

    Vertices are lattice points followed by boundary points. ``edges`` holds each
    undirected edge once as ``(i, j)`` with ``i < j``; ``lengths`` are metric
    arclengths of the straight segments.
    """

    vertices: np.ndarray
    boundary_flags: np.ndarray
    boundary_order: list[np.ndarray]
    edges: np.ndarray
    lengths: np.ndarray
    h: float
    stencil_radius: int = 3
    domain_kind: str = ""
    metric_name: str = ""
    vertex_metric: np.ndarray | None = None
    lattice_ij: np.ndarray | None = None
    full_stencil: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("vertices", "boundary_flags", "edges", "lengths", "vertex_metric", "lattice_ij", "full_stencil"):
            arr = getattr(self, name)
            if arr is not None:
                arr.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        return np.concatenate(self.boundary_order)

    @cached_property
    def boundary_position(self) -> dict[int, tuple[int, int]]:
        """Vertex id -> (loop index, position within loop)."""
        return {int(v): (k, i) for k, loop in enumerate(self.boundary_order) for i, v in enumerate(loop)}

    @cached_property
    def adjacency(self) -> "Adjacency":
        return Adjacency.from_mesh(self)

    def edge_length(self, i: int, j: int) -> float:
        adj = self.adjacency
        lo, hi = adj.indptr[i], adj.indptr[i + 1]
        hit = np.nonzero(adj.nbr[lo:hi] == j)[0]
        if len(hit) == 0:
            raise KeyError(f"no edge {i}-{j}")
        return float(adj.length[lo + hit[0]])

    def boundary_tangent(self, v: int) -> np.ndarray:
        loop_id, pos = self.boundary_position[int(v)]
        loop = self.boundary_order[loop_id]
        t = self.vertices[loop[(pos + 1) % len(loop)]] - self.vertices[loop[pos - 1]]
        return t / np.linalg.norm(t)

    def nearest_vertex(self, point, interior_only: bool = False) -> int:
        pts = self.vertices
        d = np.linalg.norm(pts - np.asarray(point, dtype=float), axis=1)
        if interior_only:
            d = np.where(self.boundary_flags, np.inf, d)
        return int(np.argmin(d))

    def to_json(self, path: str | Path | None = None) -> str:
        doc = {
            "vertices": self.vertices.tolist(),
            "boundary_flags": self.boundary_flags.tolist(),
            "boundary_order": [loop.tolist() for loop in self.boundary_order],
            "edges": [[int(i), int(j), float(w)] for (i, j), w in zip(self.edges, self.lengths)],
            "h": self.h,
            "domain_kind": self.domain_kind,
            "metric_name": self.metric_name,
            "stencil_radius": self.stencil_radius,
        }
        if self.vertex_metric is not None:
            doc["vertex_metric"] = self.vertex_metric.tolist()
        if self.lattice_ij is not None:
            doc["lattice_ij"] = self.lattice_ij.tolist()
        if self.full_stencil is not None:
            doc["full_stencil"] = self.full_stencil.tolist()
        text = json.dumps(doc)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, source: str | Path) -> "Mesh":
        text = Path(source).read_text() if not str(source).lstrip().startswith("{") else str(source)
        doc = json.loads(text)
        edges = np.array(doc["edges"], dtype=float).reshape(-1, 3)

        def opt(key, dtype):
            return np.array(doc[key], dtype=dtype) if key in doc else None

        return cls(
            vertices=np.array(doc["vertices"], dtype=float).reshape(-1, 2),
            boundary_flags=np.array(doc["boundary_flags"], dtype=bool),
            boundary_order=[np.array(loop, dtype=np.int64) for loop in doc["boundary_order"]],
            edges=edges[:, :2].astype(np.int64),
            lengths=edges[:, 2].copy(),
            h=float(doc["h"]),
            stencil_radius=int(doc.get("stencil_radius", 3)),
            domain_kind=doc.get("domain_kind", ""),
            metric_name=doc.get("metric_name", ""),
            vertex_metric=opt("vertex_metric", float),
            lattice_ij=opt("lattice_ij", np.int64),
            full_stencil=opt("full_stencil", bool),
        )


@dataclass(eq=False)
class Adjacency:
    """Directed CSR view of a mesh, neighbours sorted by angle around each vertex.

    ``rev[k]`` is the CSR slot of the reverse of edge ``k``; ``fan_ok[k]`` marks
    that neighbours ``k`` and the next one (cyclically) span a usable triangle:
    they are joined by an edge and subtend an acute angle in the vertex metric.
    """

    indptr: np.ndarray
    nbr: np.ndarray
    length: np.ndarray
    rev: np.ndarray
    fan_ok: np.ndarray
    metric3: np.ndarray

    @classmethod
    def from_mesh(cls, mesh: Mesh) -> "Adjacency":
        n = mesh.n_vertices
        i, j = mesh.edges[:, 0], mesh.edges[:, 1]
        src = np.concatenate([i, j])
        dst = np.concatenate([j, i])
        w = np.concatenate([mesh.lengths, mesh.lengths])
        d = mesh.vertices[dst] - mesh.vertices[src]
        ang = np.arctan2(d[:, 1], d[:, 0])
        order = np.lexsort((ang, src))
        src, dst, w, d = src[order], dst[order], w[order], d[order]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, src + 1, 1)
        indptr = np.cumsum(indptr)

        keys = src * n + dst
        sorter = np.argsort(keys, kind="stable")
        rev = sorter[np.searchsorted(keys, dst * n + src, sorter=sorter)]

        if mesh.vertex_metric is not None:
            m3 = np.asarray(mesh.vertex_metric, dtype=float)
        else:
            m3 = np.tile([1.0, 0.0, 1.0], (n, 1))
        # successor of each slot within its row (cyclic)
        pos = np.arange(len(src)) - indptr[src]
        deg = indptr[src + 1] - indptr[src]
        nxt = indptr[src] + (pos + 1) % deg
        a, b = d, d[nxt]
        g = m3[src]
        ga = np.column_stack([g[:, 0] * a[:, 0] + g[:, 1] * a[:, 1], g[:, 1] * a[:, 0] + g[:, 2] * a[:, 1]])
        inner = ga[:, 0] * b[:, 0] + ga[:, 1] * b[:, 1]
        cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
        linked = np.isin(dst * n + dst[nxt], keys[sorter], assume_unique=False)
        fan_ok = (inner > 0) & (cross > 0) & linked & (deg > 2)
        return cls(indptr, dst.astype(np.int64), w, rev.astype(np.int64), fan_ok, m3)


def _segment_inside(shape: Shape, p0: np.ndarray, p1: np.ndarray, h: float, tol: float) -> np.ndarray:
    if len(p0) == 0:
        return np.zeros(0, dtype=bool)
    n_samples = max(3, int(math.ceil(np.max(np.linalg.norm(p1 - p0, axis=1)) / (0.25 * h)))) + 1
    ok = np.ones(len(p0), dtype=bool)
    for t in np.linspace(0.0, 1.0, n_samples):
        idx = np.nonzero(ok)[0]
        if len(idx) == 0:
            break
        sd = shape.signed_distance(p0[idx] + t * (p1[idx] - p0[idx]))
        ok[idx[sd < -tol]] = False
    return ok


def _resample_loop(loop: np.ndarray, metric: Metric, h: float) -> np.ndarray:
    s = _metric_arclength(metric, loop)
    n = max(8, int(math.ceil(s[-1] / h)))
    target = s[-1] * np.arange(n) / n
    closed = np.vstack([loop, loop[:1]])
    x = np.interp(target, s, closed[:, 0])
    y = np.interp(target, s, closed[:, 1])
    return np.column_stack([x, y])


def build_mesh(domain: MetricDomain, h: float, stencil_radius: int = 3, *,
               boundary_metric: Metric | None = None, segment_tol: float = 0.1,
               lattice_margin: float = 0.25) -> Mesh:
    """Discretize ``domain`` into a lattice + boundary-loop wide-stencil graph.

    Parameters
    ----------
    h
        lattice spacing; boundary loops are resampled at metric arclength <= h.
    stencil_radius
        Chebyshev radius of the lattice stencil (primitive directions only).
    boundary_metric
        metric used to resample boundary loops (default: the domain's own).
        Two meshes built with the same boundary metric share their vertex set.
    segment_tol
        tolerance, in units of h, of the segment-inside-domain test; absorbs the
        sagitta of chords between neighbouring boundary samples.
    lattice_margin
        lattice points closer than ``lattice_margin * h`` to the boundary are dropped.
    """
    if not h > 0:
        raise MeshError("h must be positive")
    if stencil_radius < 1:
        raise MeshError("stencil_radius must be >= 1")
    shape, metric = domain.shape, domain.metric
    bmetric = boundary_metric or metric
    R = int(stencil_radius)
    tol = segment_tol * h

    x0, y0, x1, y1 = shape.bounds()
    i0, i1 = int(math.floor(x0 / h)) - 1, int(math.ceil(x1 / h)) + 1
    j0, j1 = int(math.floor(y0 / h)) - 1, int(math.ceil(y1 / h)) + 1
    I, J = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
    I, J = I.ravel(), J.ravel()
    lat = np.column_stack([I * h, J * h])
    sd_all = shape.signed_distance(lat)
    keep = sd_all > lattice_margin * h
    I, J, lat, sd_lat = I[keep], J[keep], lat[keep], sd_all[keep]
    n_lat = len(lat)

    loops = [_resample_loop(lp, bmetric, h) for lp in shape.loops(min(h / 20.0, 1e-3))]
    n_bnd = sum(len(lp) for lp in loops)
    if n_lat + n_bnd == 0:
        raise MeshError("empty domain")
    vertices = np.vstack([lat] + loops) if n_lat else np.vstack(loops)
    boundary_flags = np.zeros(len(vertices), dtype=bool)
    boundary_flags[n_lat:] = True
    order, start = [], n_lat
    for lp in loops:
        order.append(np.arange(start, start + len(lp), dtype=np.int64))
        start += len(lp)

    grid = -np.ones((i1 - i0 + 1, j1 - j0 + 1), dtype=np.int64)
    grid[I - i0, J - j0] = np.arange(n_lat)

    edge_i, edge_j = [], []
    offsets = stencil_offsets(R)
    lat_degree = np.zeros(n_lat, dtype=np.int64)
    for a, b in offsets:
        I2, J2 = I + a, J + b
        inb = (I2 >= i0) & (I2 <= i1) & (J2 >= j0) & (J2 <= j1)
        src = np.nonzero(inb)[0]
        dst = grid[I2[src] - i0, J2[src] - j0]
        src, dst = src[dst >= 0], dst[dst >= 0]
        half = 0.5 * h * math.hypot(a, b)
        near = np.minimum(sd_lat[src], sd_lat[dst]) < half + tol
        ok = np.ones(len(src), dtype=bool)
        ok[near] = _segment_inside(shape, lat[src[near]], lat[dst[near]], h, tol)
        src, dst = src[ok], dst[ok]
        np.add.at(lat_degree, src, 1)
        np.add.at(lat_degree, dst, 1)
        edge_i.append(src)
        edge_j.append(dst)

    if n_bnd:
        bpts = vertices[n_lat:]
        bidx = np.arange(n_lat, n_lat + n_bnd)
        base_i = np.floor(bpts[:, 0] / h).astype(np.int64)
        base_j = np.floor(bpts[:, 1] / h).astype(np.int64)
        cand_s, cand_d = [], []
        for di in range(-R, R + 2):
            for dj in range(-R, R + 2):
                ii, jj = base_i + di, base_j + dj
                close = (np.abs(ii * h - bpts[:, 0]) <= R * h + 1e-12) & (np.abs(jj * h - bpts[:, 1]) <= R * h + 1e-12)
                close &= (ii >= i0) & (ii <= i1) & (jj >= j0) & (jj <= j1)
                k = np.nonzero(close)[0]
                tgt = grid[ii[k] - i0, jj[k] - j0]
                cand_s.append(bidx[k[tgt >= 0]])
                cand_d.append(tgt[tgt >= 0])
        pairs = cKDTree(bpts).query_pairs(R * h + 1e-12, p=np.inf, output_type="ndarray")
        cand_s.append(bidx[pairs[:, 0]])
        cand_d.append(bidx[pairs[:, 1]])
        cs, cd = np.concatenate(cand_s), np.concatenate(cand_d)
        ok = _segment_inside(shape, vertices[cs], vertices[cd], h, tol)
        edge_i.append(cs[ok])
        edge_j.append(cd[ok])

    ei, ej = np.concatenate(edge_i), np.concatenate(edge_j)
    lo, hi = np.minimum(ei, ej), np.maximum(ei, ej)
    edges = np.unique(np.column_stack([lo, hi]), axis=0)
    lengths = _simpson_lengths(metric, vertices[edges[:, 0]], vertices[edges[:, 1]])

    n = len(vertices)
    graph = coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n))
    n_comp, _ = connected_components(graph, directed=False)
    if n_comp != 1:
        raise MeshError(f"edge graph is disconnected ({n_comp} components)")

    vm = metric(vertices)
    lattice_ij = np.full((n, 2), np.iinfo(np.int64).min, dtype=np.int64)
    lattice_ij[:n_lat, 0], lattice_ij[:n_lat, 1] = I, J
    full = np.zeros(n, dtype=bool)
    full[:n_lat] = lat_degree == 2 * len(offsets)
    return Mesh(
        vertices=vertices,
        boundary_flags=boundary_flags,
        boundary_order=order,
        edges=edges.astype(np.int64),
        lengths=lengths,
        h=float(h),
        stencil_radius=R,
        domain_kind=shape.kind,
        metric_name=metric.name,
        vertex_metric=np.column_stack([vm[:, 0, 0], vm[:, 0, 1], vm[:, 1, 1]]),
        lattice_ij=lattice_ij,
        full_stencil=full,
    )


# ---------------------------------------------------------------------------
# scenario catalog

SCENARIOS = ("disk", "annulus", "dumbbell", "conformal-disk")


def scenario_domain(name: str, **kw) -> MetricDomain:
    if name == "disk":
        return MetricDomain(Disk(), EuclideanMetric(), name="disk")
    if name == "annulus":
        return MetricDomain(Annulus(kw.get("r_in", 0.3)), EuclideanMetric(), name="annulus")
    if name == "dumbbell":
        return MetricDomain(Dumbbell(), EuclideanMetric(), name="dumbbell")
    if name == "conformal-disk":
        return MetricDomain(Disk(), ConformalBumpMetric(kw.get("amplitude", 0.3)), name="conformal-disk")
    raise KeyError(f"unknown scenario {name!r}; choose from {SCENARIOS}")


def scenario_gauge(name: str) -> GaugeMap:
    """Boundary-fixing gauge used to manufacture the isometric twin of a scenario."""
    if name in ("disk", "conformal-disk"):
        return swirl_gauge(0.5)
    if name == "annulus":
        return swirl_gauge(0.3, r_in=0.3)
    if name == "dumbbell":
        return bump_gauge(shift=(0.08, 0.05), center=(0.6, 0.0), radius=0.35)
    raise KeyError(name)
