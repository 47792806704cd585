"""Distance fields on stencil meshes, shortest paths, descent directions and
numeric regularity tests.

Two solvers share one propagation kernel:

``"graph"``
    exact Dijkstra on the stencil graph. Distances form a genuine metric on the
    vertex set (symmetric, triangle inequality), at the price of an O(1)
    metrication error whose gradient is quantized to the stencil's facet normals.
``"upwind"``
    the same front ordering, with wide-stencil semi-Lagrangian updates. First
    order consistent with the Riemannian distance, including gradients. Not
    exactly symmetric.
"""

from __future__ import annotations

import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit

from . import _kernels
from .metric_domain import Mesh, MetricDomain

__all__ = [
    "SOLVERS",
    "DistanceError",
    "DistanceField",
    "FieldStack",
    "Direction",
    "RegularWindow",
    "distance_field",
    "distance_fields",
    "shortest_path",
    "geodesic_path",
    "path_length",
    "direction_at",
    "local_fit",
    "detect_cut",
    "regular_boundary_window",
    "FieldSampler",
    "descent_points",
    "write_distance_field",
    "read_distance_field",
    "thread_count",
]

SOLVERS = ("upwind", "graph")
DEFAULT_TAU_CUT = 0.05
DEFAULT_THETA_MIN = 10.0


class DistanceError(RuntimeError):
    """Raised when a distance query is outside its domain of validity."""


def thread_count(threads: int | None = None) -> int:
    """Resolve a thread cap; ``None`` reads ``DDF_THREADS`` (0 = all cores)."""
    if threads is None:
        threads = int(os.environ.get("DDF_THREADS", "0") or 0)
    if threads <= 0:
        threads = os.cpu_count() or 1
    return threads


@dataclass(eq=False)
class DistanceField:
    source: int
    dist: np.ndarray
    parent: np.ndarray
    mesh: Mesh = field(repr=False)
    solver: str = "upwind"


@dataclass(eq=False)
class FieldStack:
    """Distance fields from several sources over one mesh, stored row-wise."""

    sources: np.ndarray
    dist: np.ndarray
    parent: np.ndarray
    mesh: Mesh = field(repr=False)
    solver: str = "upwind"

    def __post_init__(self):
        self._row = {int(s): r for r, s in enumerate(self.sources)}

    def __len__(self):
        return len(self.sources)

    def __getitem__(self, r: int) -> DistanceField:
        return DistanceField(int(self.sources[r]), self.dist[r], self.parent[r], self.mesh, self.solver)

    def row(self, source: int) -> int:
        return self._row[int(source)]

    def field_of(self, source: int) -> DistanceField:
        return self[self.row(source)]


def _check_solver(solver: str):
    if solver not in SOLVERS:
        raise ValueError(f"unknown solver {solver!r}; expected one of {SOLVERS}")


def distance_fields(mesh: Mesh, sources: Sequence[int], solver: str = "upwind",
                    threads: int | None = None) -> FieldStack:
    """Distance fields from every vertex in ``sources``.

    Rows are computed independently and may run on several threads; results do
    not depend on the thread count.
    """
    _check_solver(solver)
    src = np.asarray(sources, dtype=np.int64).ravel()
    n = mesh.n_vertices
    if len(src) and (src.min() < 0 or src.max() >= n):
        raise DistanceError("source is not a mesh vertex")
    adj = mesh.adjacency
    xy = np.ascontiguousarray(mesh.vertices)
    dist = np.empty((len(src), n))
    parent = np.empty((len(src), n), dtype=np.int32)
    upwind = solver == "upwind"

    def run(lo, hi):
        _kernels.propagate_many(adj.indptr, adj.nbr, adj.length, adj.rev, adj.fan_ok, xy, adj.metric3,
                                src[lo:hi], upwind, dist[lo:hi], parent[lo:hi])

    workers = min(thread_count(threads), max(len(src), 1))
    if workers <= 1:
        run(0, len(src))
    else:
        bounds = np.linspace(0, len(src), workers + 1).astype(int)
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(lambda ab: run(*ab), zip(bounds[:-1], bounds[1:])))
    if not np.all(np.isfinite(dist)):
        bad = int(np.count_nonzero(~np.isfinite(dist[0] if len(dist) else dist)))
        raise DistanceError(f"{bad} unreachable vertices (mesh graph is not connected)")
    return FieldStack(src, dist, parent, mesh, solver)


def distance_field(mesh: Mesh, source: int, solver: str = "upwind") -> DistanceField:
    return distance_fields(mesh, [source], solver, threads=1)[0]


@njit(cache=True)
def _backtrace(parent, target, limit):
    out = np.empty(limit, dtype=np.int64)
    v = target
    k = 0
    while v >= 0 and k < limit:
        out[k] = v
        k += 1
        v = parent[v]
    return out[:k]


def shortest_path(field: DistanceField, target: int) -> np.ndarray:
    """Vertices of the predecessor chain from ``target`` back to the source.

    The first entry is ``target`` and the last is ``field.source``.
    """
    if not np.isfinite(field.dist[target]):
        raise DistanceError(f"vertex {target} unreachable")
    path = _backtrace(field.parent, int(target), len(field.dist) + 1)
    if path[-1] != field.source:
        raise DistanceError("predecessor chain does not reach the source")
    return path


def path_length(mesh: Mesh, path: Sequence[int]) -> float:
    """Metric length of a vertex polyline, summed from its last vertex backwards.

    Summation order matches graph propagation, so for graph fields the result
    equals ``dist[target]`` bit for bit.
    """
    total = 0.0
    for a, b in zip(path[::-1][:-1], path[::-1][1:]):
        total += mesh.edge_length(int(a), int(b))
    return total


@dataclass(frozen=True)
class Direction:
    base: int
    vector: np.ndarray


def _metric_at(mesh: Mesh, v: int, domain: MetricDomain | None) -> np.ndarray:
    if domain is not None:
        return domain.metric(mesh.vertices[v])[0]
    if mesh.vertex_metric is None:
        return np.eye(2)
    a, b, c = mesh.vertex_metric[v]
    return np.array([[a, b], [b, c]])


def local_fit(field: DistanceField, at: int, degree: int = 1) -> tuple[np.ndarray, float]:
    """Least-squares fit of ``field.dist`` over the stencil of ``at``.

    Returns ``(gradient, rms_residual)``. The model is
    ``dist(p) ~ dist(at) + <gradient, p - at>`` plus, for ``degree=2``, the
    three quadratic terms and, for ``degree=3``, the four cubic ones (which
    absorb smooth curvature, leaving kinks).
    """
    mesh = field.mesh
    adj = mesh.adjacency
    nb = adj.nbr[adj.indptr[at]:adj.indptr[at + 1]]
    X = (mesh.vertices[nb] - mesh.vertices[at]) / mesh.h
    y = field.dist[nb] - field.dist[at]
    if len(nb) < 3:
        raise DistanceError(f"rank-deficient stencil at vertex {at}")
    if degree == 2:
        X = np.column_stack([X, X[:, 0] ** 2, X[:, 0] * X[:, 1], X[:, 1] ** 2])
    elif degree == 3:
        u, v = X[:, 0], X[:, 1]
        X = np.column_stack([u, v, u * u, u * v, v * v, u**3, u * u * v, u * v * v, v**3])
    coef, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < X.shape[1]:
        raise DistanceError(f"rank-deficient degree-{degree} stencil at vertex {at}")
    resid = y - X @ coef
    return coef[:2] / mesh.h, float(np.sqrt(np.mean(resid**2)))


def _check_stencil_point(field: DistanceField, at: int):
    mesh = field.mesh
    if mesh.boundary_flags[at]:
        raise DistanceError(f"vertex {at} is on the boundary")
    if at == field.source:
        raise DistanceError("direction undefined at the source")
    if mesh.full_stencil is not None and not mesh.full_stencil[at]:
        raise DistanceError(f"vertex {at} lacks a full stencil")
    adj = mesh.adjacency
    if np.any(adj.nbr[adj.indptr[at]:adj.indptr[at + 1]] == field.source):
        raise DistanceError(f"vertex {at} is adjacent to the source")


def direction_at(field: DistanceField, at: int, metric: MetricDomain | None = None) -> Direction:
    """Unit tangent at ``at`` of the shortest path towards the field's source.

    Computed as minus the metric gradient of the distance field, normalized in
    the metric at ``at``.
    """
    _check_stencil_point(field, at)
    grad, _ = local_fit(field, at)
    g = _metric_at(field.mesh, at, metric)
    up = np.linalg.solve(g, grad)
    norm = math.sqrt(max(float(grad @ up), 0.0))
    if norm < 0.5:
        raise DistanceError(f"gradient norm {norm:.3f} < 0.5 at vertex {at} (cut locus?)")
    return Direction(int(at), -up / norm)


def detect_cut(field: DistanceField, at: int, tau_cut: float = DEFAULT_TAU_CUT) -> bool:
    """True when the local polynomial fit residual exceeds ``tau_cut * h``.

    The fit is cubic when the stencil has room for it, so curvature of the
    field a few cells from its source is not mistaken for a kink.
    """
    _check_stencil_point(field, at)
    adj = field.mesh.adjacency
    degree = 3 if adj.indptr[at + 1] - adj.indptr[at] >= 16 else 2
    _, rms = local_fit(field, at, degree=degree)
    return rms > tau_cut * field.mesh.h


# ---------------------------------------------------------------------------
# regular windows


@dataclass(frozen=True)
class RegularWindow:
    center_point: int
    boundary_samples: tuple[int, ...]
    nearest: int
    loop: int
    whole_loop: bool = False

    def __contains__(self, z) -> bool:
        return int(z) in self.boundary_samples

    def __len__(self):
        return len(self.boundary_samples)


@njit(cache=True)
def _path_probe(parent, start, boundary_flags, xy, chord_min):
    """Walk the predecessor chain from ``start`` to the source.

    Returns (touches, chord_vertex): whether a boundary vertex other than the
    source is visited, and the last vertex before the source lying at least
    ``chord_min`` (chart distance) from it.
    """
    v = start
    touches = False
    path = np.empty(parent.shape[0] + 1, dtype=np.int64)
    k = 0
    while v >= 0:
        path[k] = v
        k += 1
        v = parent[v]
    src = path[k - 1]
    for i in range(k - 1):
        if boundary_flags[path[i]]:
            touches = True
    chord = path[0]
    for i in range(k - 2, -1, -1):
        dx = xy[path[i], 0] - xy[src, 0]
        dy = xy[path[i], 1] - xy[src, 1]
        if dx * dx + dy * dy >= chord_min * chord_min:
            chord = path[i]
            break
    return touches, chord


def _window_test(fields: FieldStack, r: int, p: int, domain, tau_cut, theta_min) -> bool:
    mesh = fields.mesh
    f = fields[r]
    z = f.source
    try:
        if detect_cut(f, p, tau_cut):
            return False
    except DistanceError:
        return False
    touches, chord = _path_probe(f.parent, p, mesh.boundary_flags, mesh.vertices, 4.0 * mesh.h)
    if touches:
        return False
    c = mesh.vertices[chord] - mesh.vertices[z]
    t = mesh.boundary_tangent(z)
    g = _metric_at(mesh, z, domain)
    cos = abs(c @ g @ t) / math.sqrt((c @ g @ c) * (t @ g @ t))
    return math.degrees(math.acos(min(1.0, cos))) >= theta_min


def regular_boundary_window(fields: FieldStack, p: int, domain: MetricDomain | None = None, *,
                            tau_cut: float = DEFAULT_TAU_CUT, theta_min: float = DEFAULT_THETA_MIN,
                            min_samples: int = 5) -> RegularWindow:
    """Maximal contiguous arc of boundary samples around a nearest point of ``p``.

    ``fields`` must be sourced at boundary vertices (the samples); an arc is
    contiguous with respect to the order of the samples along their loop.
    Each sample z in the window passes: no cut detected at ``p`` in the field
    of z, the path [pz] meets the boundary only at z, and it meets the boundary
    at a metric angle of at least ``theta_min`` degrees.
    """
    mesh = fields.mesh
    if mesh.boundary_flags[p]:
        raise DistanceError("window centre must be an interior vertex")
    col = fields.dist[:, p]
    q_row = int(np.flatnonzero(col == col.min())[np.argmin(fields.sources[col == col.min()])])
    q = int(fields.sources[q_row])
    loop_id, _ = mesh.boundary_position[q]
    on_loop = [(mesh.boundary_position[int(s)][1], r) for r, s in enumerate(fields.sources)
               if mesh.boundary_position.get(int(s), (-1,))[0] == loop_id]
    on_loop.sort()
    rows = [r for _, r in on_loop]
    k = len(rows)
    start = rows.index(q_row)

    cache: dict[int, bool] = {}

    def ok(i):
        r = rows[i % k]
        if r not in cache:
            cache[r] = _window_test(fields, r, p, domain, tau_cut, theta_min)
        return cache[r]

    if not ok(start):
        raise DistanceError(f"nearest boundary sample {q} of vertex {p} fails the regularity test")
    lo = hi = 0
    while hi + 1 - lo < k and ok(start + hi + 1):
        hi += 1
    while hi - (lo - 1) < k and ok(start + lo - 1):
        lo -= 1
    idx = [rows[(start + i) % k] for i in range(lo, hi + 1)]
    samples = tuple(int(fields.sources[r]) for r in idx)
    if len(samples) < min_samples:
        raise DistanceError(f"regular window at {p} has {len(samples)} < {min_samples} samples")
    return RegularWindow(int(p), samples, q, loop_id, whole_loop=len(samples) == k)


# ---------------------------------------------------------------------------
# off-vertex evaluation and descent curves


class FieldSampler:
    """Local quadratic least-squares evaluation of vertex data at arbitrary points."""

    def __init__(self, mesh: Mesh, domain: MetricDomain | None = None, neighbours: int = 12):
        from scipy.spatial import cKDTree

        self.mesh = mesh
        self.domain = domain
        self.k = neighbours
        self.tree = cKDTree(mesh.vertices)

    def _design(self, point):
        _, idx = self.tree.query(point, k=self.k)
        d = (self.mesh.vertices[idx] - point) / self.mesh.h
        X = np.empty((len(idx), 6))
        X[:, 0] = 1.0
        X[:, 1:3] = d
        X[:, 3] = d[:, 0] * d[:, 0]
        X[:, 4] = d[:, 0] * d[:, 1]
        X[:, 5] = d[:, 1] * d[:, 1]
        return idx, X

    def jet(self, values: np.ndarray, point) -> tuple[np.ndarray, np.ndarray]:
        """Value(s) and gradient(s) at ``point``; ``values`` is (N,) or (m, N)."""
        point = np.asarray(point, dtype=float)
        idx, X = self._design(point)
        vals = np.atleast_2d(values)[:, idx].T
        try:
            coef = np.linalg.solve(X.T @ X, X.T @ vals)
        except np.linalg.LinAlgError:
            coef = np.linalg.lstsq(X, vals, rcond=None)[0]
        return coef[0], coef[1:3].T / self.mesh.h

    def metric(self, point) -> np.ndarray:
        point = np.asarray(point, dtype=float)
        if self.domain is not None:
            return self.domain.metric(point)[0]
        m3 = self.mesh.vertex_metric
        if m3 is None:
            return np.eye(2)
        val, _ = self.jet(m3.T, point)
        return np.array([[val[0], val[1]], [val[1], val[2]]])

    def descent_direction(self, values: np.ndarray, point) -> np.ndarray:
        _, grad = self.jet(values, point)
        grad = grad[0]
        g = self.metric(point)
        up = np.linalg.solve(g, grad)
        return -up / math.sqrt(max(float(grad @ up), 1e-300))


def descent_points(sampler: FieldSampler, values: np.ndarray, start, arclengths: Sequence[float],
                   step: float | None = None, ascend: bool = False) -> np.ndarray:
    """Points at the given metric arclengths along the gradient-descent curve of
    ``values`` (a distance field) started at ``start``.

    Integrated with the midpoint rule; the curve approximates the shortest path
    from ``start`` towards the field's source. With ``ascend`` the curve runs
    the other way (continuing the geodesic backwards through ``start``).
    """
    step = step or 0.5 * sampler.mesh.h
    sign = -1.0 if ascend else 1.0
    targets = np.sort(np.asarray(arclengths, dtype=float))
    out = np.empty((len(targets), 2))
    x = np.asarray(start, dtype=float).copy()
    s = 0.0
    i = 0
    while i < len(targets):
        while i < len(targets) and targets[i] <= s + 1e-15:
            out[i] = x
            i += 1
        if i == len(targets):
            break
        ds = min(step, targets[i] - s)
        k1 = sign * sampler.descent_direction(values, x)
        x = x + ds * sign * sampler.descent_direction(values, x + 0.5 * ds * k1)
        s += ds
    order = np.argsort(np.argsort(np.asarray(arclengths, dtype=float)))
    return out[order]


def geodesic_path(field: DistanceField, target: int, sampler: FieldSampler | None = None,
                  step: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Shortest path from ``target`` to the source traced on the continuous field.

    Follows the descent curve of the interpolated distance with midpoint steps
    of ``step`` (default h/2) until it is within 2h of the source. Returns the
    curve points and the vertices nearest to them (consecutive repeats
    dropped, first ``target``, last the source). Unlike the predecessor chain
    the snapped vertices stay within h/sqrt(2) of the traced curve.
    """
    mesh = field.mesh
    if target == field.source:
        return mesh.vertices[[target]].copy(), np.array([target], dtype=np.int64)
    sampler = sampler or FieldSampler(mesh)
    step = step or 0.5 * mesh.h
    src_xy = mesh.vertices[field.source]
    x = mesh.vertices[target].astype(float).copy()
    pts = [x.copy()]
    budget = int(4.0 * field.dist[target] / step) + 10
    for _ in range(budget):
        if np.linalg.norm(x - src_xy) <= 2.0 * mesh.h:
            break
        k1 = sampler.descent_direction(field.dist, x)
        x = x + step * sampler.descent_direction(field.dist, x + 0.5 * step * k1)
        pts.append(x.copy())
    else:
        raise DistanceError(f"descent from {target} did not reach the source")
    pts.append(src_xy.copy())
    pts = np.array(pts)
    _, idx = sampler.tree.query(pts)
    idx[0], idx[-1] = target, field.source
    keep = np.concatenate([[True], idx[1:] != idx[:-1]])
    return pts, idx[keep].astype(np.int64)


# ---------------------------------------------------------------------------
# binary dump

_DDF0 = b"DDF0"


def write_distance_field(field: DistanceField, path: str | Path) -> None:
    n = len(field.dist)
    with open(path, "wb") as fh:
        fh.write(_DDF0)
        fh.write(struct.pack("<Q", n))
        fh.write(np.asarray(field.dist, dtype="<f8").tobytes())
        fh.write(np.asarray(field.parent, dtype="<i8").tobytes())


def read_distance_field(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(dist, parent)``; raises ``ValueError`` on a corrupt file."""
    data = Path(path).read_bytes()
    if data[:4] != _DDF0:
        raise ValueError("bad magic: not a DDF0 distance field")
    if len(data) < 12:
        raise ValueError("truncated DDF0 header")
    (n,) = struct.unpack("<Q", data[4:12])
    if len(data) != 12 + 16 * n:
        raise ValueError("truncated DDF0 payload")
    dist = np.frombuffer(data, dtype="<f8", count=n, offset=12).copy()
    parent = np.frombuffer(data, dtype="<i8", count=n, offset=12 + 8 * n).copy()
    return dist, parent
