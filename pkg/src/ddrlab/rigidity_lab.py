"""Falsifiable numeric versions of the rigidity criteria: nearest boundary
points, geodesic membership by a maximum principle, and the first-order
relation between distance differences and unit directions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ddr import BoundaryFrame, DDFMatrix, _same_frame
from .distance_engine import (
    DistanceError,
    FieldSampler,
    FieldStack,
    RegularWindow,
    descent_points,
    direction_at,
    distance_fields,
    shortest_path,
)
from .metric_domain import MetricDomain, Mesh

# derivative step in units of h (the largest allowed), jet size for off-vertex
# evaluation, and the narrowest direction pair accepted for lambda
DEFAULT_T_STEP_H = 5.0
JET_NEIGHBOURS = 20
DEFAULT_MIN_ANGLE = 45.0

__all__ = [
    "WindowError",
    "nearest_point_criterion",
    "nearest_samples",
    "PhiFunction",
    "phi_function",
    "phi_argmax",
    "geodesic_membership",
    "dphi_derivative",
    "DphiPair",
    "DphiReport",
    "angle_recovery",
    "choose_pairs",
]


class WindowError(ValueError):
    """A boundary sample lies outside the regular window the criterion needs."""


def _tol(values: np.ndarray, tol: float | None) -> float:
    if tol is not None:
        return tol
    return 1e-12 * max(1.0, float(np.max(np.abs(values))) if values.size else 1.0)


def nearest_point_criterion(D_x: DDFMatrix, y: int, tol: float | None = None) -> bool:
    """True iff row ``y`` of ``D_x`` is nonpositive (up to ``tol``).

    Equivalent to: sample ``y`` minimizes the distance from the source over
    the frame.
    """
    return bool(np.all(D_x.values[y] <= _tol(D_x.values, tol)))


def nearest_samples(D_x: DDFMatrix, tol: float | None = None) -> np.ndarray:
    """All sample indices accepted by :func:`nearest_point_criterion`."""
    t = _tol(D_x.values, tol)
    return np.flatnonzero(np.all(D_x.values <= t, axis=1))


@dataclass(frozen=True, eq=False)
class PhiFunction:
    """values[y] = D_p(y, z) - D_x(y, z) over the frame, anchored at ``z_index``."""

    frame: BoundaryFrame
    z_index: int
    values: np.ndarray


def phi_function(D_p: DDFMatrix, D_x: DDFMatrix, z: int) -> PhiFunction:
    _same_frame(D_p.frame, D_x.frame)
    return PhiFunction(D_p.frame, int(z), D_p.values[:, z] - D_x.values[:, z])


def phi_argmax(phi: PhiFunction, tol: float | None = None) -> int:
    """Sample index of the maximum of ``phi``; among (near-)ties the one
    closest to the anchor in boundary arclength."""
    v = phi.values
    top = np.flatnonzero(v >= v.max() - _tol(v, tol))
    d = phi.frame.arc_distance(phi.z_index, top)
    return int(top[np.argmin(d)])


def geodesic_membership(D_p: DDFMatrix, D_x: DDFMatrix, z: int, window: RegularWindow,
                        delta_max: float | None = None) -> bool:
    """Whether x lies on the shortest path from p to boundary sample ``z``.

    Decided by where the anchored difference function peaks: on the path it
    peaks at ``z`` itself. Only meaningful for ``z`` in a regular window of p.
    ``delta_max`` defaults to twice the frame spacing.
    """
    frame = D_p.frame
    if int(frame.samples[z]) not in window:
        raise WindowError(f"sample {z} (vertex {frame.samples[z]}) is outside the regular window")
    if delta_max is None:
        delta_max = 2.0 * (frame.spacing or frame.max_gap())
    phi = phi_function(D_p, D_x, z)
    best = phi_argmax(phi)
    return bool(frame.arc_distance(z, best) <= delta_max + 1e-12)


# ---------------------------------------------------------------------------
# first-order relations


def _fields_for(mesh: Mesh, vertices: Sequence[int], fields: FieldStack | None, solver: str) -> FieldStack:
    if fields is not None:
        return fields
    return distance_fields(mesh, list(vertices), solver)


def dphi_derivative(mesh: Mesh, frame: BoundaryFrame, p: int, z1: int, z2: int, t_step: float, *,
                    fields: FieldStack | None = None, sampler: FieldSampler | None = None,
                    solver: str = "upwind", at=None) -> float:
    """Derivative at t = 0 of t -> D_{gamma(t)}(z1, z2), gamma the unit-speed
    geodesic from p towards boundary sample z1.

    gamma is traced by gradient descent on the z1 distance field (ascent for
    negative t) and D is evaluated off-vertex with a local quadratic fit. The
    derivative combines central differences over +-t_step and +-t_step/2
    (Richardson), which cancels the t^2 term that dominates on short paths.
    ``at`` optionally replaces the vertex position of p by an off-vertex point.
    """
    if z1 == z2:
        raise ValueError("z1 and z2 must differ")
    if not 0.0 < t_step <= 5.0 * mesh.h + 1e-15:
        raise ValueError(f"t_step must lie in (0, 5h], got {t_step}")
    v1, v2 = int(frame.samples[z1]), int(frame.samples[z2])
    fields = _fields_for(mesh, (v1, v2), fields, solver)
    f1 = fields.dist[fields.row(v1)]
    f2 = fields.dist[fields.row(v2)]
    if f1[p] < 2.0 * t_step:
        raise DistanceError(f"path from {p} to sample {z1} is shorter than 2*t_step")
    sampler = sampler or FieldSampler(mesh, neighbours=JET_NEIGHBOURS)
    start = mesh.vertices[p] if at is None else np.asarray(at, dtype=float)
    ts = [0.5 * t_step, t_step]
    ahead = descent_points(sampler, f1, start, ts)
    behind = descent_points(sampler, f1, start, ts, ascend=True)
    both = np.vstack([f1, f2])
    diff = []
    for a, b, t in zip(ahead, behind, ts):
        d_a, _ = sampler.jet(both, a)
        d_b, _ = sampler.jet(both, b)
        diff.append(((d_a[0] - d_a[1]) - (d_b[0] - d_b[1])) / (2.0 * t))
    return float((4.0 * diff[0] - diff[1]) / 3.0)


@dataclass(frozen=True)
class DphiPair:
    """One direction pair at p.

    ``lhs`` is -1 + <v1, v2> from unit directions (of the partner manifold in
    pair mode); ``rhs`` / ``rhs_rev`` are the finite-difference derivatives in
    M along the geodesics towards z1 / z2. ``ref`` / ``ref_rev`` are what they
    are compared with: ``lhs`` itself in single-manifold mode, the same
    derivatives measured in the partner at p' in pair mode. lambda1 and
    lambda2 are the ratios rhs / ref and rhs_rev / ref_rev.
    """

    z1: int
    z2: int
    lhs: float
    rhs: float
    rhs_rev: float
    ref: float
    ref_rev: float
    lambda1: float
    lambda2: float


@dataclass
class DphiReport:
    p: int
    pairs: list[DphiPair] = field(default_factory=list)
    partner: int | None = None

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([lam for q in self.pairs for lam in (q.lambda1, q.lambda2)])

    @property
    def lambda_consistency(self) -> float:
        lam = self.lambdas
        return float(lam.max() - lam.min()) if lam.size else math.nan

    @property
    def lambda_median(self) -> float:
        lam = self.lambdas
        return float(np.median(lam)) if lam.size else math.nan

    def residuals(self) -> np.ndarray:
        """|rhs - lhs| for both orientations (meaningful in single-manifold mode)."""
        return np.array([abs(r - q.lhs) for q in self.pairs for r in (q.rhs, q.rhs_rev)])


def choose_pairs(window: RegularWindow, frame: BoundaryFrame, n_pairs: int = 6, min_angle: float = DEFAULT_MIN_ANGLE,
                 directions: dict[int, np.ndarray] | None = None, metric: np.ndarray | None = None
                 ) -> list[tuple[int, int]]:
    """Sample-index pairs from ``window`` preferring wide direction angles.

    With ``directions`` (vertex -> unit vector at p) pairs are ranked by their
    metric angle and those below ``min_angle`` degrees dropped; otherwise the
    window is split evenly.
    """
    idx = [frame.index_of(v) for v in window.boundary_samples]
    if directions is None:
        k = len(idx)
        return [(idx[i], idx[(i + k // 2) % k]) for i in np.linspace(0, k - 1, min(n_pairs, k)).astype(int)
                if idx[i] != idx[(i + k // 2) % k]]
    g = np.eye(2) if metric is None else metric
    usable = np.array([i for i in idx if int(frame.samples[i]) in directions], dtype=np.int64)
    if len(usable) < 2:
        return []
    V = np.array([directions[int(frame.samples[i])] for i in usable])
    ang = np.degrees(np.arccos(np.clip(V @ g @ V.T, -1.0, 1.0)))
    ia, ib = np.triu_indices(len(usable), 1)
    keep = ang[ia, ib] >= min_angle
    ia, ib, a_ang = ia[keep], ib[keep], ang[ia, ib][keep]
    # widest first, ties by frame index
    order = np.lexsort((usable[ib], usable[ia], -a_ang))
    chosen: list[tuple[int, int]] = []
    used: dict[int, int] = {}
    for t in order:
        a, b = int(usable[ia[t]]), int(usable[ib[t]])
        # spread the load over many samples
        if used.get(a, 0) >= 2 or used.get(b, 0) >= 2:
            continue
        chosen.append((a, b))
        used[a] = used.get(a, 0) + 1
        used[b] = used.get(b, 0) + 1
        if len(chosen) == n_pairs:
            break
    return chosen


def _directions(fields: FieldStack, at: int, samples: Sequence[int], domain: MetricDomain | None):
    out = {}
    for v in samples:
        try:
            out[int(v)] = direction_at(fields.field_of(int(v)), at, domain).vector
        except DistanceError:
            pass
    return out


def angle_recovery(mesh: Mesh, frame: BoundaryFrame, p: int, window: RegularWindow, *,
                   fields: FieldStack, partner: tuple | None = None,
                   domain: MetricDomain | None = None, partner_domain: MetricDomain | None = None,
                   t_step: float | None = None, n_pairs: int = 6, min_angle: float = DEFAULT_MIN_ANGLE,
                   degenerate_tol: float = 1e-3) -> DphiReport:
    """Compare finite-difference derivatives of D at p with direction angles.

    Single-manifold mode compares the derivatives with -1 + <v1, v2> from the
    directions at p (lambda should be 1). With ``partner = (mesh', fields',
    p')`` (optionally with a fourth entry, an off-vertex position of p')
    each oriented derivative in M is divided by the same derivative measured
    at p' in the partner, which equals -1 + <w1, w2> there; the two
    orientations of a pair give lambda1 and lambda2. Directions of the partner
    select wide pairs and reject degenerate ones.
    """
    if len(window) < 5:
        raise WindowError(f"window at {p} has fewer than 5 samples")
    t_step = t_step or DEFAULT_T_STEP_H * mesh.h
    dirs_m = _directions(fields, p, window.boundary_samples, domain)
    if partner is None:
        ref_mesh, ref_fields, ref_p, ref_domain = mesh, fields, p, domain
        ref_at = None
        dirs_ref = dirs_m
    else:
        ref_mesh, ref_fields, ref_p = partner[:3]
        ref_at = partner[3] if len(partner) > 3 else None
        ref_domain = partner_domain
        dirs_ref = _directions(ref_fields, ref_p, window.boundary_samples, ref_domain)
    # the finite differences need paths of length at least 2 * t_step on both sides
    reach = 2.0 * t_step
    common = {v: d for v, d in dirs_ref.items() if v in dirs_m
              and fields.dist[fields.row(v), p] >= reach and ref_fields.dist[ref_fields.row(v), ref_p] >= reach}
    g_ref = (ref_domain.metric(ref_mesh.vertices[ref_p])[0] if ref_domain is not None
             else _vertex_metric(ref_mesh, ref_p))
    pairs = choose_pairs(window, frame, n_pairs, min_angle, common, g_ref)
    if not pairs:
        raise WindowError(f"no usable direction pairs in the window at {p}")
    sampler = FieldSampler(mesh, domain, neighbours=JET_NEIGHBOURS)
    ref_sampler = sampler if partner is None else FieldSampler(ref_mesh, ref_domain, neighbours=JET_NEIGHBOURS)
    report = DphiReport(int(p), partner=None if partner is None else int(partner[2]))
    for z1, z2 in pairs:
        w1, w2 = common[int(frame.samples[z1])], common[int(frame.samples[z2])]
        inner = float(w1 @ g_ref @ w2)
        if abs(inner - 1.0) < degenerate_tol:
            raise ValueError(f"degenerate direction pair ({z1}, {z2}): <w1, w2> = {inner:.6f}")
        lhs = -1.0 + inner
        rhs = dphi_derivative(mesh, frame, p, z1, z2, t_step, fields=fields, sampler=sampler)
        rhs_rev = dphi_derivative(mesh, frame, p, z2, z1, t_step, fields=fields, sampler=sampler)
        if partner is None:
            ref = ref_rev = lhs
        else:
            ref = dphi_derivative(ref_mesh, frame, ref_p, z1, z2, t_step, fields=ref_fields, sampler=ref_sampler,
                                  at=ref_at)
            ref_rev = dphi_derivative(ref_mesh, frame, ref_p, z2, z1, t_step, fields=ref_fields,
                                      sampler=ref_sampler, at=ref_at)
        report.pairs.append(DphiPair(int(z1), int(z2), lhs, rhs, rhs_rev, ref, ref_rev, rhs / ref, rhs_rev / ref_rev))
    return report


def _vertex_metric(mesh: Mesh, v: int) -> np.ndarray:
    if mesh.vertex_metric is None:
        return np.eye(2)
    a, b, c = mesh.vertex_metric[v]
    return np.array([[a, b], [b, c]])


def path_vertices(fields: FieldStack, p: int, z_vertex: int) -> np.ndarray:
    """Vertices of the stored shortest path between p and a frame sample."""
    return shortest_path(fields.field_of(int(z_vertex)), int(p))
