"""Scenario runners and the numeric checks behind the acceptance report.

Every check returns a :class:`Check` holding the measured values, the
thresholds it was judged against and a pass flag. Heavy state (meshes and
frame-sourced distance fields) lives in :class:`ScenarioData` and is dropped
as soon as a scenario is finished.
"""

from __future__ import annotations

import gc
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .ddr import BoundaryFrame, DDFArchive, DDFMatrix, ddf_from_fields, make_frame, sup_dist
from .distance_engine import (
    DistanceError,
    FieldSampler,
    FieldStack,
    distance_fields,
    geodesic_path,
    regular_boundary_window,
)
from .metric_domain import (
    Annulus,
    ConformalBumpMetric,
    Disk,
    EuclideanMetric,
    MetricDomain,
    Mesh,
    build_mesh,
    pullback_domain,
    scenario_domain,
    scenario_gauge,
)
from .reconstruction import (
    DEFAULT_THRESHOLDS,
    CertificateError,
    Correspondence,
    boundary_identity_check,
    build_phi,
    gauge_match_errors,
    geodesic_image_check,
    grid_sources,
    isometry_certificate,
    prepare_pair,
)
from .rigidity_lab import WindowError, angle_recovery, geodesic_membership, nearest_samples

__all__ = [
    "ANNULUS_ORACLE",
    "Check",
    "ScenarioData",
    "annulus_oracle",
    "metric_space_suite",
    "nearest_point_suite",
    "membership_suite",
    "dphi_suite",
    "gauge_pair_run",
    "negative_control_run",
    "negative_control_domain",
    "acceptance",
]

ANNULUS_ORACLE = 2.0 * math.sqrt(0.55) + 0.3 * (math.pi - 2.0 * math.acos(0.375))
ORACLE_POINTS = ((-0.8, 0.0), (0.8, 0.0))
PROBE_MARGIN = 0.1


def _scalar(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return float(v)
    return v


@dataclass
class Check:
    """One verdict with its evidence."""

    key: str
    title: str
    passed: bool
    measured: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        parts = []
        for k, v in self.measured.items():
            v = _scalar(v)
            if isinstance(v, float):
                parts.append(f"{k}={v:.6g}")
            elif isinstance(v, (int, bool, str)):
                parts.append(f"{k}={v}")
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.key} {self.title}: " + ", ".join(parts)

    def to_dict(self) -> dict:
        return {"key": self.key, "title": self.title, "passed": bool(self.passed),
                "measured": _plain(self.measured), "thresholds": _plain(self.thresholds),
                "detail": _plain(self.detail)}


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    return _scalar(obj)


# ---------------------------------------------------------------------------
# scenario state


@dataclass(eq=False)
class ScenarioData:
    """Mesh, boundary frame and frame-sourced distance fields of one scenario."""

    name: str
    domain: MetricDomain
    mesh: Mesh
    frame: BoundaryFrame
    fields: FieldStack
    seconds: float = 0.0

    @classmethod
    def build(cls, name: str, h: float, *, stencil_radius: int = 3, frame_spacing: float = 0.02,
              solver: str = "upwind", domain: MetricDomain | None = None) -> "ScenarioData":
        t0 = time.perf_counter()
        domain = domain or scenario_domain(name)
        mesh = build_mesh(domain, h, stencil_radius)
        frame = make_frame(mesh, frame_spacing)
        fields = distance_fields(mesh, frame.samples, solver)
        return cls(name, domain, mesh, frame, fields, time.perf_counter() - t0)

    @property
    def h(self) -> float:
        return self.mesh.h

    def probes(self, n: int, rng: np.random.Generator, spacing: float = 0.05) -> np.ndarray:
        """Seeded interior grid sources at least PROBE_MARGIN from the boundary."""
        cand = grid_sources(self.mesh, spacing, self.domain, include_boundary=False)
        cand = cand[self.domain.shape.signed_distance(self.mesh.vertices[cand]) > PROBE_MARGIN]
        return np.sort(rng.choice(cand, size=min(n, len(cand)), replace=False))


def negative_control_domain(name: str) -> MetricDomain:
    """Non-isometric partner of a scenario: a conformal bump of amplitude 0.3
    supported strictly inside the domain (the flat disk for conformal-disk)."""
    if name == "disk":
        return scenario_domain("conformal-disk")
    if name == "conformal-disk":
        return scenario_domain("disk")
    base = scenario_domain(name)
    if isinstance(base.shape, Annulus):
        bump = ConformalBumpMetric(0.3, center=(0.65, 0.0), radius=0.3)
    elif isinstance(base.shape, Disk):
        bump = ConformalBumpMetric(0.3)
    else:
        bump = ConformalBumpMetric(0.3, center=(0.6, 0.0), radius=0.35)
    return MetricDomain(base.shape, bump, name=f"{name}-conformal")


# ---------------------------------------------------------------------------
# distance oracle


def annulus_oracle(h: float, stencil_radius: int = 3, solver: str = "upwind") -> Check:
    """Distance across the hole of the Euclidean annulus against the
    tangent-arc-tangent formula."""
    t0 = time.perf_counter()
    dom = scenario_domain("annulus")
    mesh = build_mesh(dom, h, stencil_radius)
    a, b = (int(np.argmin(np.linalg.norm(mesh.vertices - np.array(p), axis=1))) for p in ORACLE_POINTS)
    f = distance_fields(mesh, [a], solver)
    value = float(f.dist[0, b])
    seconds = time.perf_counter() - t0
    rel = abs(value - ANNULUS_ORACLE) / ANNULUS_ORACLE
    snap = float(max(np.linalg.norm(mesh.vertices[a] - ORACLE_POINTS[0]),
                     np.linalg.norm(mesh.vertices[b] - ORACLE_POINTS[1])))
    th = {"rel_error": 0.01, "seconds": 60.0}
    return Check("c1", "annulus distance oracle", rel <= th["rel_error"] and seconds <= th["seconds"],
                 {"h": h, "computed": value, "exact": ANNULUS_ORACLE, "rel_error": rel, "seconds": seconds,
                  "vertex_snap": snap},
                 th)


# ---------------------------------------------------------------------------
# exact metric-space suite (graph metric)


def metric_space_suite(h: float = 0.02, scenario: str = "disk", n_points: int = 48, n_triples: int = 1000,
                       n_pairs: int = 1000, seed: int = 0, frame_spacing: float = 0.02) -> Check:
    """Zero diagonal, antisymmetry, cocycle identity, triangle inequality and
    the 2-Lipschitz bound, on exact graph distances.

    Inequalities carry an absolute slack of 1e-12 times the distance scale
    (sums of rounded doubles are not associative); the identities built from
    one potential are bit-exact.
    """
    rng = np.random.default_rng(seed)
    data = ScenarioData.build(scenario, h, frame_spacing=frame_spacing, solver="graph")
    mesh, frame, fields = data.mesh, data.frame, data.fields
    pts = np.sort(rng.choice(mesh.n_vertices, size=n_points, replace=False))
    fp = distance_fields(mesh, pts, "graph")
    scale = float(fields.dist.max())
    slack = 1e-12 * max(1.0, scale)

    diag = anti = cocycle = 0.0
    mats = [ddf_from_fields(fields, frame, int(x)) for x in pts]
    for D in mats:
        v = D.values
        diag = max(diag, float(np.abs(np.diag(v)).max()))
        anti = max(anti, float(np.abs(v + v.T).max()))
        cocycle = max(cocycle, _cocycle_defect(v))

    d = fp.dist[:, pts]
    idx = rng.integers(0, n_points, size=(n_triples, 3))
    tri = d[idx[:, 0], idx[:, 2]] - d[idx[:, 0], idx[:, 1]] - d[idx[:, 1], idx[:, 2]]
    tri_viol = int(np.count_nonzero(tri > slack))
    sym = float(np.abs(d - d.T).max())

    pairs = rng.integers(0, n_points, size=(n_pairs, 2))
    lip = np.array([sup_dist(mats[i], mats[j]) - 2.0 * d[i, j] for i, j in pairs])
    lip_viol = int(np.count_nonzero(lip > slack))

    th = {"identity_tol": 0.0, "inequality_slack": slack}
    ok = diag == 0.0 and anti == 0.0 and cocycle <= slack and tri_viol == 0 and lip_viol == 0 and sym <= slack
    return Check("c2", "exact metric-space suite", ok,
                 {"h": h, "matrices": len(mats), "frame_samples": len(frame), "max_diagonal": diag,
                  "max_antisymmetry": anti, "max_cocycle": cocycle, "triangle_triples": n_triples,
                  "triangle_violations": tri_viol, "max_triangle_excess": float(tri.max()),
                  "lipschitz_pairs": n_pairs, "lipschitz_violations": lip_viol,
                  "max_lipschitz_excess": float(lip.max()), "max_asymmetry": sym},
                 th)


def _cocycle_defect(v: np.ndarray) -> float:
    """max |D(y, w) - D(y, z) - D(z, w)| over all sample triples."""
    worst = 0.0
    for y in range(len(v)):
        worst = max(worst, float(np.abs(v[y, None, :] - v[y, :, None] - v).max()))
    return worst


# ---------------------------------------------------------------------------
# nearest-point criterion


def nearest_point_suite(scenarios: Sequence[str], h: float = 0.02, n_points: int = 500, seed: int = 0,
                        frame_spacing: float = 0.02) -> Check:
    """Samples accepted by the nonpositive-row criterion against the brute
    force argmin of d(x, .) on the frame, computed from fields sourced at x.

    Graph distances are exactly symmetric, so both sides see the same numbers
    up to rounding; ties are minimisers within 1e-12 of the largest |D_x|
    entry, the tolerance the criterion itself uses.
    """
    rng = np.random.default_rng(seed)
    per = {}
    ok = True
    for name in scenarios:
        data = ScenarioData.build(name, h, frame_spacing=frame_spacing, solver="graph")
        interior = np.flatnonzero(~data.mesh.boundary_flags)
        xs = np.sort(rng.choice(interior, size=min(n_points, len(interior)), replace=False))
        fx = distance_fields(data.mesh, xs, "graph")
        agree = 0
        for r, x in enumerate(xs):
            D_x = ddf_from_fields(data.fields, data.frame, int(x))
            crit = set(nearest_samples(D_x).tolist())
            # same tie tolerance as the criterion: 1e-12 of the largest |D_x|
            tie = 1e-12 * max(1.0, float(np.ptp(D_x.potential())))
            dz = fx.dist[r, data.frame.samples]
            brute = set(np.flatnonzero(dz <= dz.min() + tie).tolist())
            agree += crit == brute
        per[name] = {"points": len(xs), "agree": agree, "fraction": agree / len(xs)}
        ok &= agree == len(xs)
        del data, fx
        gc.collect()
    return Check("c3", "nearest-point criterion vs brute force", ok,
                 {"h": h, "points_per_scenario": n_points,
                  "min_fraction": min(v["fraction"] for v in per.values())},
                 {"agreement": 1.0, "tie_tol": "1e-12 x max(1, max |D_x|)"}, {"scenarios": per})


# ---------------------------------------------------------------------------
# geodesic membership


def _window(data: ScenarioData, p: int):
    try:
        return regular_boundary_window(data.fields, int(p), data.domain)
    except DistanceError:
        return None


def membership_suite(data: ScenarioData, n_triples: int = 500, seed: int = 0, per_path: int = 6,
                     mid_fraction: float = 0.25, neg_max: float = 0.3) -> dict:
    """Precision and recall of the membership test on (p, z, x) triples.

    Positives are vertices of the traced shortest path with
    d(p, x) >= ``mid_fraction`` d(p, z); negatives lie at chart distance at
    least delta_max (two frame spacings) and at most ``neg_max`` from it.
    Recall on the first part of the path is reported separately.
    """
    rng = np.random.default_rng(seed)
    frame, mesh, fields = data.frame, data.mesh, data.fields
    sampler = FieldSampler(mesh, data.domain)
    delta = 2.0 * frame.spacing
    interior = np.flatnonzero(~mesh.boundary_flags)
    interior_xy = mesh.vertices[interior]
    cand = grid_sources(mesh, 0.05, data.domain, include_boundary=False)
    cand = cand[data.domain.shape.signed_distance(mesh.vertices[cand]) > PROBE_MARGIN]
    tp = fn = fp = tn = near_tp = near_n = 0
    triples = paths = 0
    rng.shuffle(cand)
    for p in cand:
        if triples >= n_triples:
            break
        win = _window(data, p)
        if win is None:
            continue
        z = int(win.boundary_samples[rng.integers(len(win))])
        zi = frame.index_of(z)
        fz = fields.field_of(z)
        curve, path = geodesic_path(fz, int(p), sampler)
        dpz = fz.dist[p]
        prog = (dpz - fz.dist[path]) / dpz
        body = path[(prog >= mid_fraction) & (path != z) & ~mesh.boundary_flags[path]]
        head = path[(prog > 0) & (prog < mid_fraction)]
        if len(body) < 2:
            continue
        # only vertices in the curve's box grown by neg_max can be negatives
        box = np.all((interior_xy >= curve.min(axis=0) - neg_max) & (interior_xy <= curve.max(axis=0) + neg_max),
                     axis=1)
        near = interior[box]
        dd, _ = cKDTree(curve).query(interior_xy[box])
        neg = near[(dd >= delta) & (dd <= neg_max)]
        if len(neg) == 0:
            continue
        k = per_path // 2
        pos_x = rng.choice(body, size=min(k, len(body)), replace=False)
        neg_x = rng.choice(neg, size=min(k, len(neg)), replace=False)
        D_p = ddf_from_fields(fields, frame, int(p))
        for x in pos_x:
            hit = geodesic_membership(D_p, ddf_from_fields(fields, frame, int(x)), zi, win, delta)
            tp += hit
            fn += not hit
        for x in neg_x:
            hit = geodesic_membership(D_p, ddf_from_fields(fields, frame, int(x)), zi, win, delta)
            fp += hit
            tn += not hit
        for x in head[: 2]:
            near_n += 1
            near_tp += geodesic_membership(D_p, ddf_from_fields(fields, frame, int(x)), zi, win, delta)
        triples += len(pos_x) + len(neg_x)
        paths += 1
    precision = tp / max(tp + fp, 1)
    recall = tp / max(tp + fn, 1)
    return {"scenario": data.name, "h": data.h, "triples": triples, "paths": paths, "true_pos": tp,
            "false_neg": fn, "false_pos": fp, "true_neg": tn, "precision": precision, "recall": recall,
            "near_p_recall": near_tp / max(near_n, 1), "near_p_tested": near_n, "delta_max": delta}


# ---------------------------------------------------------------------------
# first-order relation


def dphi_suite(data: ScenarioData, n_probes: int = 20, seed: int = 0, n_pairs: int = 6, tol: float = 0.05) -> dict:
    """Residuals |dD/dt - (-1 + <v1, v2>)| over regular-window pairs."""
    rng = np.random.default_rng(seed)
    res = []
    skipped = 0
    for p in data.probes(n_probes, rng):
        win = _window(data, p)
        if win is None:
            skipped += 1
            continue
        try:
            rep = angle_recovery(data.mesh, data.frame, int(p), win, fields=data.fields, domain=data.domain,
                                 n_pairs=n_pairs)
        except (WindowError, DistanceError, ValueError):
            skipped += 1
            continue
        res.extend(rep.residuals().tolist())
    res = np.asarray(res)
    frac = float(np.mean(res <= tol)) if res.size else 0.0
    return {"scenario": data.name, "h": data.h, "tests": int(res.size), "probes_skipped": skipped,
            "fraction_within": frac, "median_residual": float(np.median(res)) if res.size else math.nan,
            "p90_residual": float(np.quantile(res, 0.9)) if res.size else math.nan,
            "max_residual": float(res.max()) if res.size else math.nan, "tol": tol}


# ---------------------------------------------------------------------------
# gauge pair and negative control


def _pair_core(data: ScenarioData, domain_b: MetricDomain, grid_spacing: float):
    pair = prepare_pair(data.domain, domain_b, data.h, frame_spacing=data.frame.spacing,
                        stencil_radius=data.mesh.stencil_radius, mesh_a=data.mesh, fields_a=data.fields)
    src = grid_sources(pair.mesh_a, grid_spacing, data.domain, frame=pair.frame)
    corr = build_phi(pair.archive_a(src), pair.archive_b(), mesh_a=pair.mesh_a, mesh_b=pair.mesh_b)
    return pair, corr


def gauge_pair_run(data: ScenarioData, *, n_probes: int = 20, seed: int = 0, grid_spacing: float = 0.05,
                   keep: bool = False) -> dict:
    """Pipeline on the scenario and its gauge twin: phi against the ground
    truth, boundary identity, geodesic images and the certificate."""
    gauge = scenario_gauge(data.name)
    t0 = time.perf_counter()
    pair, corr = _pair_core(data, pullback_domain(data.domain, gauge), grid_spacing)
    h = data.h
    inner = ~pair.mesh_a.boundary_flags[corr.sources]
    err = gauge_match_errors(corr, gauge) / h
    bdef = boundary_identity_check(corr)
    rng = np.random.default_rng(seed)
    probes = data.probes(n_probes, rng)
    sa, sb = FieldSampler(pair.mesh_a), FieldSampler(pair.mesh_b)
    fractions = []
    phi_profiles = []
    for p in probes:
        win = _window(data, p)
        if win is None:
            continue
        z = int(win.boundary_samples[rng.integers(len(win))])
        fractions.append(geodesic_image_check(corr, pair.mesh_a, pair.mesh_b, int(p), z, win,
                                              fields_a=pair.fields_a, fields_b=pair.fields_b,
                                              sampler_a=sa, sampler_b=sb))
        if len(phi_profiles) < 3:
            phi_profiles.append(_phi_profile(data, int(p), z))
    try:
        cert = isometry_certificate(corr, (pair.domain_a, pair.domain_b), (pair.mesh_a, pair.mesh_b),
                                    fields_a=pair.fields_a, fields_b=pair.fields_b, probes=probes)
    except CertificateError as exc:
        cert = {"error": str(exc), "lambda_fraction": 0.0, "lambda_spread_max": math.inf,
                "lambda_spread_median": math.inf, "distance_defect_max": math.inf, "isometric": False,
                "probes": []}
    th = DEFAULT_THRESHOLDS
    out = {
        "scenario": data.name, "h": h, "seconds": time.perf_counter() - t0,
        "sources": int(len(corr.sources)), "interior_sources": int(inner.sum()),
        "match_within_2h": float(np.mean(err[inner] <= th["match_tol_h"])),
        "match_error_max_h": float(err[inner].max()),
        "mutual": float(corr.mutual.mean()), "ambiguous": float(corr.ambiguous.mean()),
        "median_sup_defect": float(np.median(corr.sup_defect[inner])),
        "boundary_defect": float(bdef), "boundary_bound": 2.0 * pair.frame.spacing,
        "geodesic_image_mean": float(np.mean(fractions)) if fractions else 0.0,
        "geodesic_image_min": float(np.min(fractions)) if fractions else 0.0,
        "geodesic_image_probes": len(fractions),
        "lambda_fraction": cert["lambda_fraction"], "lambda_spread_max": cert["lambda_spread_max"],
        "lambda_spread_median": cert["lambda_spread_median"],
        "distance_defect": cert["distance_defect_max"], "distance_defect_over_h": cert["distance_defect_max"] / h,
        "certificate": cert, "phi_profiles": phi_profiles,
    }
    out["checks"] = {
        "match": out["match_within_2h"] >= 0.98,
        "boundary": out["boundary_defect"] <= out["boundary_bound"],
        "geodesic_image": out["geodesic_image_mean"] >= 0.95,
        "lambda": out["lambda_fraction"] >= th["lambda_fraction"],
        "distance": out["distance_defect"] <= th["distance_tol_h"] * h,
    }
    if keep:
        out["_pair"], out["_corr"] = pair, corr
    return out


def _phi_profile(data: ScenarioData, p: int, z: int) -> dict:
    """Phi along the frame for a point half way along [pz] (for plots)."""
    fz = data.fields.field_of(z)
    _, path = geodesic_path(fz, p)
    x = int(path[len(path) // 2])
    D_p = ddf_from_fields(data.fields, data.frame, p).potential()
    D_x = ddf_from_fields(data.fields, data.frame, x).potential()
    zi = data.frame.index_of(z)
    phi = (D_p - D_p[zi]) - (D_x - D_x[zi])
    return {"p": p, "x": x, "z_index": int(zi), "arc": data.frame.arc_positions.tolist(),
            "loop": data.frame.loop_ids.tolist(), "phi": phi.tolist()}


def negative_control_run(data: ScenarioData, baseline_median_defect: float, *, n_probes: int = 20, seed: int = 0,
                         grid_spacing: float = 0.05, partner: MetricDomain | None = None) -> dict:
    """Pipeline on a non-isometric pair; returns the partner scenario data too
    (key ``_data_b``) so its fields can be reused."""
    domain_b = partner or negative_control_domain(data.name)
    t0 = time.perf_counter()
    pair, corr = _pair_core(data, domain_b, grid_spacing)
    inner = ~pair.mesh_a.boundary_flags[corr.sources]
    rng = np.random.default_rng(seed)
    probes = data.probes(n_probes, rng)
    try:
        cert = isometry_certificate(corr, (pair.domain_a, pair.domain_b), (pair.mesh_a, pair.mesh_b),
                                    fields_a=pair.fields_a, fields_b=pair.fields_b, probes=probes)
    except CertificateError as exc:
        cert = {"error": str(exc), "lambda_fraction": 0.0, "lambda_spread_max": math.nan,
                "isometric": False, "probes": []}
    med = float(np.median(corr.sup_defect[inner]))
    out = {
        "scenario": f"{data.name} vs {domain_b.name}", "h": data.h, "seconds": time.perf_counter() - t0,
        "median_sup_defect": med, "baseline_median_sup_defect": baseline_median_defect,
        "defect_ratio": med / baseline_median_defect if baseline_median_defect > 0 else math.inf,
        "lambda_spread_max": cert["lambda_spread_max"], "lambda_fraction": cert["lambda_fraction"],
        "certificate_isometric": bool(cert["isometric"]), "certificate": cert,
    }
    out["checks"] = {
        "certificate_fails": not out["certificate_isometric"],
        "lambda_spread": bool(out["lambda_spread_max"] > 0.1),
        "defect_ratio": out["defect_ratio"] >= 10.0,
    }
    out["_data_b"] = ScenarioData(domain_b.name, domain_b, pair.mesh_b, pair.frame, pair.fields_b)
    return out


def _public(d: dict) -> dict:
    return {k: v for k, v in d.items() if not k.startswith("_")}


# ---------------------------------------------------------------------------
# full acceptance run


ACCEPT_SCENARIOS = ("disk", "conformal-disk", "annulus", "dumbbell")
GAUGE_SCENARIOS = ("disk", "annulus")


def acceptance(h: float = 1 / 200, coarse: Sequence[float] = (1 / 50, 1 / 100), *, seed: int = 0,
               n_probes: int = 20, n_triples: int = 500, log: Callable[[str], None] | None = None) -> dict:
    """Run every acceptance check; returns ``{"checks": [Check, ...], "data": ...}``.

    Scenarios are processed one at a time so that at most three field stacks
    are alive at the finest h.
    """
    say = log or (lambda s: None)
    t_start = time.perf_counter()
    checks: list[Check] = []
    membership, dphi, gauge, control = {}, {}, {}, {}

    # 1 oracle, 2 and 3 on graph distances
    oracle = {hh: annulus_oracle(hh) for hh in (*coarse, h)}
    checks.append(oracle[h])
    say(oracle[h].line())
    checks.append(metric_space_suite(seed=seed))
    say(checks[-1].line())
    checks.append(nearest_point_suite(ACCEPT_SCENARIOS, seed=seed))
    say(checks[-1].line())

    def per_scenario(data: ScenarioData):
        membership[data.name] = membership_suite(data, n_triples, seed)
        dphi[data.name] = dphi_suite(data, n_probes, seed)
        say(f"  {data.name}: membership P={membership[data.name]['precision']:.4f} "
            f"R={membership[data.name]['recall']:.4f}; dphi within={dphi[data.name]['fraction_within']:.3f}")

    # disk, its gauge twin and the conformal control
    data = ScenarioData.build("disk", h)
    per_scenario(data)
    gauge["disk"] = gauge_pair_run(data, n_probes=n_probes, seed=seed)
    say(f"  disk gauge pair: {gauge['disk']['checks']}")
    control["disk"] = negative_control_run(data, gauge["disk"]["median_sup_defect"], n_probes=n_probes, seed=seed)
    say(f"  negative control: {control['disk']['checks']}")
    conf = control["disk"].pop("_data_b")
    conf.name = "conformal-disk"
    del data
    gc.collect()
    per_scenario(conf)
    del conf
    gc.collect()

    for name in ("annulus", "dumbbell"):
        data = ScenarioData.build(name, h)
        per_scenario(data)
        if name in GAUGE_SCENARIOS:
            gauge[name] = gauge_pair_run(data, n_probes=n_probes, seed=seed)
            say(f"  {name} gauge pair: {gauge[name]['checks']}")
        del data
        gc.collect()

    c4_ok = all(m["precision"] >= 0.95 and m["recall"] >= 0.95 and m["triples"] >= n_triples
                for m in membership.values())
    checks.append(Check("c4", "geodesic membership", c4_ok,
                        {"h": h, "min_precision": min(m["precision"] for m in membership.values()),
                         "min_recall": min(m["recall"] for m in membership.values()),
                         "min_triples": min(m["triples"] for m in membership.values())},
                        {"precision": 0.95, "recall": 0.95, "triples": n_triples}, {"scenarios": membership}))
    c5_ok = all(d["fraction_within"] >= 0.9 for d in dphi.values())
    checks.append(Check("c5", "first-order derivative relation", c5_ok,
                        {"h": h, "min_fraction_within": min(d["fraction_within"] for d in dphi.values()),
                         "tests": sum(d["tests"] for d in dphi.values())},
                        {"abs_tol": 0.05, "fraction": 0.9}, {"scenarios": dphi}))
    c6_ok = all(all(g["checks"].values()) for g in gauge.values())
    checks.append(Check("c6", "gauge-pair reconstruction", c6_ok,
                        {"h": h, **{f"{n}_{k}": v for n, g in gauge.items() for k, v in g["checks"].items()}},
                        {"match_within_2h": 0.98, "boundary_defect": "2 x frame spacing",
                         "geodesic_image": 0.95, "lambda_interval": [0.98, 1.02], "lambda_spread": 0.03,
                         "lambda_fraction": 0.9, "distance_defect_h": 3.0, "distance_scale": 0.3},
                        {n: _summary(g) for n, g in gauge.items()}))
    nc = control["disk"]
    checks.append(Check("c7", "negative control", all(nc["checks"].values()),
                        {"h": h, "lambda_spread_max": nc["lambda_spread_max"], "defect_ratio": nc["defect_ratio"],
                         "certificate_isometric": nc["certificate_isometric"]},
                        {"lambda_spread": 0.1, "defect_ratio": 10.0}, {"disk": _summary(nc)}))
    for c in checks[3:]:
        say(c.line())

    # 8: the same measurements at the coarse levels
    levels = {h: {"oracle_rel_error": oracle[h].measured["rel_error"],
                  **{n: _conv_metrics(dphi[n], gauge[n]) for n in GAUGE_SCENARIOS}}}
    for hh in coarse:
        lvl = {"oracle_rel_error": oracle[hh].measured["rel_error"]}
        for name in GAUGE_SCENARIOS:
            data = ScenarioData.build(name, hh)
            lvl[name] = _conv_metrics(dphi_suite(data, n_probes, seed),
                                      gauge_pair_run(data, n_probes=n_probes, seed=seed))
            del data
            gc.collect()
        levels[hh] = lvl
        say(f"  level h={hh:.5g}: {lvl}")
    order = sorted(levels, reverse=True)
    mono = {}
    mono["oracle_rel_error"] = _non_increasing([levels[x]["oracle_rel_error"] for x in order])
    for name in GAUGE_SCENARIOS:
        for k in levels[h][name]:
            mono[f"{name}_{k}"] = _non_increasing([levels[x][name][k] for x in order])
    total = time.perf_counter() - t_start
    checks.append(Check("c8", "convergence and runtime", all(mono.values()) and total <= 900.0,
                        {"seconds": total, **{f"monotone_{k}": v for k, v in mono.items()}},
                        {"seconds": 900.0, "levels": list(order)},
                        {"levels": {f"{x:.6g}": levels[x] for x in order}}))
    say(checks[-1].line())
    return {"checks": checks, "gauge": gauge, "control": control, "membership": membership, "dphi": dphi}


def _summary(run: dict) -> dict:
    out = {k: v for k, v in _public(run).items() if k not in ("certificate", "phi_profiles")}
    cert = run.get("certificate", {})
    out["probe_table"] = [{k: r.get(k) for k in ("probe", "window", "lambda_median", "lambda_spread",
                                                  "distance_defect", "lambda_pass", "error") if k in r}
                          for r in cert.get("probes", [])]
    return out


def _conv_metrics(dphi: dict, gauge: dict) -> dict:
    return {"median_dphi_residual": dphi["median_residual"], "median_sup_defect": gauge["median_sup_defect"],
            "boundary_defect": gauge["boundary_defect"], "median_lambda_spread": gauge["lambda_spread_median"]}


def _non_increasing(values: Sequence[float]) -> bool:
    return all(b <= a for a, b in zip(values, values[1:]))
