"""Correspondence between two manifolds with equal distance difference data:
phi by sup-norm nearest neighbours, and its boundary, geodesic and isometry
checks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .ddr import BoundaryFrame, DDFArchive, FrameMismatch, KeyIndex, _same_frame, make_frame, match_archives
from .distance_engine import (
    DistanceError,
    FieldSampler,
    FieldStack,
    RegularWindow,
    distance_fields,
    geodesic_path,
    regular_boundary_window,
)
from .metric_domain import GaugeMap, MetricDomain, Mesh, build_mesh
from .rigidity_lab import WindowError, angle_recovery

__all__ = [
    "CertificateError",
    "Correspondence",
    "build_phi",
    "boundary_identity_check",
    "geodesic_image_check",
    "geodesic_image_specificity",
    "isometry_certificate",
    "refine_partner",
    "ManifoldPair",
    "prepare_pair",
    "grid_sources",
    "gauge_match_errors",
    "DEFAULT_THRESHOLDS",
]

DEFAULT_THRESHOLDS = {
    "ratio_test": 0.9,
    "exclude_radius_h": 4.0,
    "match_tol_h": 2.0,
    "path_tol_h": 2.0,
    "lambda_tol": 0.02,
    "lambda_spread": 0.03,
    "lambda_fraction": 0.9,
    "distance_scale": 0.3,
    "distance_tol_h": 3.0,
    "min_coverage": 0.5,
}


class CertificateError(RuntimeError):
    """Too few probe points admit a regular window to certify anything."""


@dataclass(eq=False)
class Correspondence:
    """phi on the sources of archive A: ``matches[r]`` is the B vertex whose
    DDF is sup-closest to that of ``sources[r]``."""

    frame: BoundaryFrame
    sources: np.ndarray
    matches: np.ndarray
    sup_defect: np.ndarray
    second: np.ndarray
    mutual: np.ndarray
    ambiguous: np.ndarray
    data_b: DDFArchive = field(repr=False)
    mesh_a: Mesh | None = field(default=None, repr=False)
    mesh_b: Mesh | None = field(default=None, repr=False)
    boundary_defect: float | None = None
    lambda_summary: dict = field(default_factory=dict)
    isometry_defect: dict = field(default_factory=dict)

    def __post_init__(self):
        self._index = {int(s): r for r, s in enumerate(self.sources)}
        self._keys: KeyIndex | None = None

    @property
    def pairs(self) -> list[tuple[int, int, float]]:
        return [(int(a), int(b), float(d)) for a, b, d in zip(self.sources, self.matches, self.sup_defect)]

    def match_of(self, x: int) -> int:
        return int(self.matches[self._index[int(x)]])

    def query(self, potentials: np.ndarray, sources: Sequence[int] | None = None) -> dict[str, np.ndarray]:
        """Match further potentials (rows over the frame) against archive B."""
        pot = np.atleast_2d(potentials)
        src = np.full(len(pot), -1) if sources is None else np.asarray(sources)
        if self._keys is None:
            self._keys = KeyIndex.build(self.data_b)
        res = match_archives(DDFArchive(self.frame, src, pot), self.data_b, index=self._keys)
        res["vertex"] = self.data_b.sources[res["index"]]
        return res


def build_phi(data_a: DDFArchive, data_b: DDFArchive, *, mesh_a: Mesh | None = None,
              mesh_b: Mesh | None = None, ratio_level: float = DEFAULT_THRESHOLDS["ratio_test"],
              exclude_radius: float | None = None) -> Correspondence:
    """phi = (D')^-1 o D on the sources of ``data_a``.

    Every source of A is matched to its sup-nearest source of B. A match is
    mutual when the B source's own nearest A source is the original one. With
    ``mesh_b`` the runner-up is taken outside ``exclude_radius`` (default 4h)
    of the winner and matches with best / runner-up >= ``ratio_level`` are
    flagged ambiguous.
    """
    _same_frame(data_a.frame, data_b.frame)
    if len(data_a) == 0 or len(data_b) == 0:
        raise ValueError("empty archive")
    positions = None
    if mesh_b is not None:
        positions = mesh_b.vertices[data_b.sources]
        if exclude_radius is None:
            exclude_radius = DEFAULT_THRESHOLDS["exclude_radius_h"] * mesh_b.h
    fwd = match_archives(data_a, data_b, exclude_radius=exclude_radius, positions=positions)
    rows_b = np.unique(fwd["index"])
    back = match_archives(DDFArchive(data_b.frame, data_b.sources[rows_b], data_b.potentials[rows_b]), data_a)
    back_of = dict(zip(rows_b.tolist(), back["index"].tolist()))
    mutual = np.array([back_of[int(b)] == r for r, b in enumerate(fwd["index"])])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(np.isfinite(fwd["second"]), fwd["distance"] / fwd["second"], 0.0)
    return Correspondence(
        frame=data_a.frame,
        sources=np.asarray(data_a.sources),
        matches=np.asarray(data_b.sources)[fwd["index"]],
        sup_defect=fwd["distance"],
        second=fwd["second"],
        mutual=mutual,
        ambiguous=ratio >= ratio_level,
        data_b=data_b,
        mesh_a=mesh_a,
        mesh_b=mesh_b,
    )


# ---------------------------------------------------------------------------
# boundary identity


def _arc_table(mesh: Mesh) -> tuple[dict[int, tuple[int, float]], np.ndarray]:
    pos: dict[int, tuple[int, float]] = {}
    lengths = []
    for lid, loop in enumerate(mesh.boundary_order):
        s = 0.0
        for a, b in zip(loop, np.roll(loop, -1)):
            pos[int(a)] = (lid, s)
            s += mesh.edge_length(int(a), int(b))
        lengths.append(s)
    return pos, np.asarray(lengths)


def boundary_identity_check(corr: Correspondence) -> float:
    """Largest boundary displacement of phi over the boundary sources of A.

    The displacement of a boundary source x matched to x' is the boundary
    arclength from x to the boundary vertex b nearest x', plus |x' - b|
    (zero when x' = x). Stored in ``corr.boundary_defect``.
    """
    if corr.mesh_a is None or corr.mesh_b is None:
        raise ValueError("boundary check needs both meshes")
    ma, mb = corr.mesh_a, corr.mesh_b
    on_bd = ma.boundary_flags[corr.sources]
    if not np.any(on_bd):
        raise ValueError("no boundary sources in archive A")
    pos, lengths = _arc_table(ma)
    bverts = ma.boundary_vertices
    tree = cKDTree(ma.vertices[bverts])
    worst = 0.0
    for x, xp in zip(corr.sources[on_bd], corr.matches[on_bd]):
        d_off, k = tree.query(mb.vertices[xp])
        b = int(bverts[k])
        (lx, sx), (lb, sb) = pos[int(x)], pos[b]
        if lx != lb:
            disp = math.inf
        else:
            d = abs(sx - sb)
            disp = min(d, lengths[lx] - d) + d_off
        worst = max(worst, disp)
    corr.boundary_defect = float(worst)
    return float(worst)


# ---------------------------------------------------------------------------
# geodesic images


def _polyline_distance(points: np.ndarray, curve: np.ndarray) -> np.ndarray:
    """Chart distance from each point to a polyline."""
    if len(curve) == 1:
        return np.linalg.norm(points - curve[0], axis=1)
    a, b = curve[:-1], curve[1:]
    ab = b - a
    L2 = np.maximum(np.einsum("ij,ij->i", ab, ab), 1e-300)
    out = np.empty(len(points))
    for i, q in enumerate(points):
        t = np.clip(np.einsum("ij,ij->i", q - a, ab) / L2, 0.0, 1.0)
        out[i] = np.min(np.linalg.norm(a + t[:, None] * ab - q, axis=1))
    return out


def _frame_potentials(fields: FieldStack, frame: BoundaryFrame, xs: Sequence[int]) -> np.ndarray:
    rows = np.array([fields.row(s) for s in frame.samples])
    return fields.dist[rows[None, :], np.asarray(xs)[:, None]]


def _image_setup(corr, mesh_b, p, z, window, fields_b, sampler_b):
    if int(z) not in window:
        raise WindowError(f"boundary vertex {z} is outside the regular window of {p}")
    p_img = corr.match_of(p)
    curve, _ = geodesic_path(fields_b.field_of(int(z)), p_img, sampler_b)
    return p_img, curve


def geodesic_image_check(corr: Correspondence, mesh_a: Mesh, mesh_b: Mesh, p: int, z: int,
                         window: RegularWindow, *, fields_a: FieldStack, fields_b: FieldStack,
                         tol: float | None = None, sampler_a: FieldSampler | None = None,
                         sampler_b: FieldSampler | None = None) -> float:
    """Fraction of interior vertices x on the path [p z] of M whose match lies
    within ``tol`` (default 2h) of the path [p' z] of M'.

    ``z`` is a boundary vertex (a frame sample) in the regular window of p;
    D_x for path vertices is read from the frame-sourced fields of M.
    """
    tol = DEFAULT_THRESHOLDS["path_tol_h"] * mesh_b.h if tol is None else tol
    _, curve = _image_setup(corr, mesh_b, p, z, window, fields_b, sampler_b)
    _, verts = geodesic_path(fields_a.field_of(int(z)), int(p), sampler_a)
    xs = [int(v) for v in verts[1:-1] if not mesh_a.boundary_flags[v]]
    if not xs:
        return 1.0
    res = corr.query(_frame_potentials(fields_a, corr.frame, xs), xs)
    d = _polyline_distance(mesh_b.vertices[res["vertex"]], curve)
    return float(np.mean(d <= tol))


def geodesic_image_specificity(corr: Correspondence, mesh_a: Mesh, mesh_b: Mesh, p: int, z: int,
                               window: RegularWindow, off_path: Sequence[int], *, fields_a: FieldStack,
                               fields_b: FieldStack, tol: float | None = None,
                               sampler_b: FieldSampler | None = None) -> float:
    """Fraction of the off-path vertices whose matches stay farther than ``tol``
    from the path [p' z] of M'."""
    tol = DEFAULT_THRESHOLDS["path_tol_h"] * mesh_b.h if tol is None else tol
    _, curve = _image_setup(corr, mesh_b, p, z, window, fields_b, sampler_b)
    xs = [int(v) for v in off_path]
    res = corr.query(_frame_potentials(fields_a, corr.frame, xs), xs)
    d = _polyline_distance(mesh_b.vertices[res["vertex"]], curve)
    return float(np.mean(d > tol))


# ---------------------------------------------------------------------------
# isometry certificate


def refine_partner(potential: np.ndarray, fields_b: FieldStack, start, *,
                   sampler: FieldSampler | None = None, start_vertex: int | None = None) -> np.ndarray:
    """Off-vertex point of M' whose frame distances best match ``potential``.

    ``potential`` holds d_M(p, z_i) over the frame samples (the rows of
    ``fields_b``). Minimises the oscillation of potential - d_M'(x, z_i), the
    sup distance of the two DDF matrices, over chart points x with the
    distances interpolated by local quadratic fits; Nelder-Mead from
    ``start`` (usually the matched vertex). Snapping phi(p) to a vertex costs
    up to ~h/sqrt(2), which matters for derivatives taken at phi(p).
    With ``start_vertex`` the refined point must beat the exact oscillation
    at that vertex, so an exact vertex match is returned unchanged.
    """
    from scipy.optimize import minimize

    mesh = fields_b.mesh
    sampler = sampler or FieldSampler(mesh, neighbours=20)
    pot = np.asarray(potential, dtype=float)
    x0 = np.asarray(start, dtype=float)

    def osc(x):
        vals, _ = sampler.jet(fields_b.dist, x)
        return float(np.ptp(pot - vals))

    simplex = x0 + 0.5 * mesh.h * np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    res = minimize(osc, x0, method="Nelder-Mead",
                   options={"xatol": 1e-3 * mesh.h, "fatol": 1e-10, "initial_simplex": simplex})
    base = osc(x0) if start_vertex is None else float(np.ptp(pot - fields_b.dist[:, int(start_vertex)]))
    x = res.x if res.fun < base else x0
    # never wander off the matched cell
    return x if np.linalg.norm(x - x0) <= 2.0 * mesh.h else x0


def isometry_certificate(corr: Correspondence, domains: tuple[MetricDomain, MetricDomain],
                         meshes: tuple[Mesh, Mesh], *, fields_a: FieldStack, fields_b: FieldStack,
                         probes: Sequence[int], thresholds: dict | None = None,
                         t_step: float | None = None) -> dict:
    """Pointwise isometry evidence for phi at the ``probes`` (sources of A).

    First order: lambda estimates from paired derivative measurements at p
    and phi(p), with phi(p) refined off-vertex (refine_partner). Zeroth
    order: |d_M(p, y) - d_M'(phi p, phi y)| over sources y with
    d_M(p, y) <= the distance scale. Both verdicts and every threshold are
    returned.
    """
    th = dict(DEFAULT_THRESHOLDS, **(thresholds or {}))
    dom_a, dom_b = domains
    mesh_a, mesh_b = meshes
    h = mesh_a.h
    if not np.array_equal(fields_a.sources, corr.frame.samples) or not np.array_equal(
            fields_b.sources, corr.frame.samples):
        raise FrameMismatch("certificate fields must be sourced at the frame samples")
    sampler_b = FieldSampler(mesh_b, neighbours=20)
    rows = []
    usable = []
    for p in probes:
        p = int(p)
        try:
            window = regular_boundary_window(fields_a, p, dom_a)
        except DistanceError as exc:
            rows.append({"probe": p, "window": 0, "error": str(exc)})
            continue
        pb = corr.match_of(p)
        xb = refine_partner(fields_a.dist[:, p], fields_b, mesh_b.vertices[pb], sampler=sampler_b,
                            start_vertex=pb)
        # an unrefined partner is measured at its vertex, like p itself
        partner = (mesh_b, fields_b, pb) if np.array_equal(xb, mesh_b.vertices[pb]) else (mesh_b, fields_b, pb, xb)
        try:
            rep = angle_recovery(mesh_a, corr.frame, p, window, fields=fields_a,
                                 partner=partner, domain=dom_a, partner_domain=dom_b,
                                 t_step=t_step)
        except (DistanceError, WindowError, ValueError) as exc:
            rows.append({"probe": p, "window": len(window), "error": str(exc)})
            continue
        lam = rep.lambdas
        rows.append({
            "probe": p,
            "partner": pb,
            "partner_point": [float(xb[0]), float(xb[1])],
            "window": len(window),
            "lambda_median": rep.lambda_median,
            "lambda_spread": rep.lambda_consistency,
            "lambdas": lam.tolist(),
            "isometry_defect": float(np.max(np.abs(lam - 1.0))),
        })
        usable.append(len(rows) - 1)
    coverage = len(usable) / max(len(rows), 1)
    if not usable or coverage < th["min_coverage"]:
        raise CertificateError(f"regular-window coverage {coverage:.2f} below {th['min_coverage']}")

    # zeroth order: fields from every usable probe and its image
    ps = [rows[i]["probe"] for i in usable]
    pbs = [rows[i]["partner"] for i in usable]
    fa = distance_fields(mesh_a, ps, fields_a.solver)
    fb = distance_fields(mesh_b, pbs, fields_b.solver)
    interior = ~mesh_a.boundary_flags[corr.sources]
    for k, i in enumerate(usable):
        da = fa.dist[k, corr.sources]
        near = interior & (da <= th["distance_scale"]) & (corr.sources != ps[k])
        db = fb.dist[k, corr.matches[near]]
        defect = np.abs(da[near] - db)
        rows[i]["distance_pairs"] = int(near.sum())
        rows[i]["distance_defect"] = float(defect.max()) if defect.size else 0.0

    ok_rows = [rows[i] for i in usable]
    lam_pass = [abs(r["lambda_median"] - 1.0) <= th["lambda_tol"] and r["lambda_spread"] <= th["lambda_spread"]
                for r in ok_rows]
    for r, ok in zip(ok_rows, lam_pass):
        r["lambda_pass"] = bool(ok)
    # probes without a window or usable pair count as failures
    lam_frac = float(np.sum(lam_pass)) / len(rows)
    dist_defect = max(r["distance_defect"] for r in ok_rows)
    spread = max(r["lambda_spread"] for r in ok_rows)
    summary = {
        "probes": rows,
        "coverage": coverage,
        "lambda_fraction": lam_frac,
        "lambda_spread_max": spread,
        "lambda_spread_median": float(np.median([r["lambda_spread"] for r in ok_rows])),
        "lambda_median": float(np.median([r["lambda_median"] for r in ok_rows])),
        "distance_defect_max": dist_defect,
        "distance_defect_over_h": dist_defect / h,
        "thresholds": {k: th[k] for k in ("lambda_tol", "lambda_spread", "lambda_fraction",
                                          "distance_scale", "distance_tol_h", "min_coverage")},
        "h": h,
    }
    summary["lambda_ok"] = bool(lam_frac >= th["lambda_fraction"])
    summary["distance_ok"] = bool(dist_defect <= th["distance_tol_h"] * h)
    summary["isometric"] = summary["lambda_ok"] and summary["distance_ok"]
    corr.lambda_summary = {k: summary[k] for k in ("lambda_fraction", "lambda_spread_max", "lambda_median")}
    corr.isometry_defect = {r["probe"]: r["isometry_defect"] for r in ok_rows}
    return summary


# ---------------------------------------------------------------------------
# pair setup


@dataclass(eq=False)
class ManifoldPair:
    """Two manifolds over one chart shape with a common boundary frame."""

    domain_a: MetricDomain
    domain_b: MetricDomain
    mesh_a: Mesh
    mesh_b: Mesh
    frame: BoundaryFrame
    fields_a: FieldStack
    fields_b: FieldStack
    gauge: GaugeMap | None = None

    def archive_a(self, sources: Sequence[int]) -> DDFArchive:
        return DDFArchive.from_fields(self.fields_a, self.frame, sources)

    def archive_b(self, sources: Sequence[int] | None = None) -> DDFArchive:
        return DDFArchive.from_fields(self.fields_b, self.frame, sources)


def prepare_pair(domain_a: MetricDomain, domain_b: MetricDomain, h: float, *, frame_spacing: float = 0.02,
                 stencil_radius: int = 3, solver: str = "upwind", gauge: GaugeMap | None = None,
                 mesh_a: Mesh | None = None, fields_a: FieldStack | None = None) -> ManifoldPair:
    """Meshes with identical boundary sampling and frame-sourced fields on both.

    Both boundaries are resampled in the metric of ``domain_a``; ``gauge``
    (optional ground truth) maps M' onto M, so phi = gauge^-1.
    """
    if mesh_a is None:
        mesh_a = build_mesh(domain_a, h, stencil_radius)
    mesh_b = build_mesh(domain_b, h, stencil_radius, boundary_metric=domain_a.metric)
    frame = make_frame(mesh_a, frame_spacing)
    if mesh_b.n_vertices <= frame.samples.max() or not np.array_equal(
            mesh_a.vertices[frame.samples], mesh_b.vertices[frame.samples]):
        raise FrameMismatch("the two meshes do not share the boundary frame")
    if fields_a is None or not np.array_equal(fields_a.sources, frame.samples):
        fields_a = distance_fields(mesh_a, frame.samples, solver)
    fields_b = distance_fields(mesh_b, frame.samples, solver)
    return ManifoldPair(domain_a, domain_b, mesh_a, mesh_b, frame, fields_a, fields_b, gauge)


def grid_sources(mesh: Mesh, spacing: float, domain: MetricDomain | None = None, *,
                 include_boundary: bool = True, frame: BoundaryFrame | None = None) -> np.ndarray:
    """Interior vertices nearest to the points of a square grid of ``spacing``,
    plus the frame samples (or all boundary vertices) when requested."""
    x0, x1 = mesh.vertices[:, 0].min(), mesh.vertices[:, 0].max()
    y0, y1 = mesh.vertices[:, 1].min(), mesh.vertices[:, 1].max()
    gx = np.arange(math.ceil(x0 / spacing), math.floor(x1 / spacing) + 1) * spacing
    gy = np.arange(math.ceil(y0 / spacing), math.floor(y1 / spacing) + 1) * spacing
    pts = np.array([(x, y) for x in gx for y in gy])
    interior = np.flatnonzero(~mesh.boundary_flags)
    tree = cKDTree(mesh.vertices[interior])
    d, k = tree.query(pts)
    keep = d <= 0.75 * mesh.h
    if domain is not None:
        keep &= domain.shape.contains(pts)
    out = np.unique(interior[k[keep]])
    if include_boundary:
        bd = frame.samples if frame is not None else mesh.boundary_vertices
        out = np.concatenate([out, np.asarray(bd)])
    return out.astype(np.int64)


def gauge_match_errors(corr: Correspondence, gauge: GaugeMap) -> np.ndarray:
    """Chart distance from phi(x) to the ground-truth image gauge^-1(x), for
    every source of the correspondence."""
    truth = gauge.inverse(corr.mesh_a.vertices[corr.sources])
    return np.linalg.norm(corr.mesh_b.vertices[corr.matches] - truth, axis=1)
