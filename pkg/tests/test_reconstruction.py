from __future__ import annotations

import numpy as np
import pytest

from ddrlab.ddr import DDFArchive, FrameMismatch
from ddrlab.distance_engine import FieldSampler, distance_fields
from ddrlab.metric_domain import build_mesh, pullback_domain, scenario_domain, scenario_gauge, slide_gauge
from ddrlab.reconstruction import (
    boundary_identity_check,
    build_phi,
    gauge_match_errors,
    grid_sources,
    isometry_certificate,
    prepare_pair,
    refine_partner,
)


@pytest.fixture(scope="module")
def identity_pair():
    dom = scenario_domain("disk")
    return prepare_pair(dom, dom, 0.02)


@pytest.fixture(scope="module")
def gauge_pair():
    dom = scenario_domain("disk")
    g = scenario_gauge("disk")
    return prepare_pair(dom, pullback_domain(dom, g), 0.02, gauge=g)


def test_identity_pair_matches_exactly(identity_pair):
    pair = identity_pair
    src = grid_sources(pair.mesh_a, 0.1, pair.domain_a, frame=pair.frame)
    corr = build_phi(pair.archive_a(src), pair.archive_b(), mesh_a=pair.mesh_a, mesh_b=pair.mesh_b)
    assert np.array_equal(corr.matches, corr.sources)
    assert np.all(corr.sup_defect == 0.0)
    assert corr.mutual.all()
    assert boundary_identity_check(corr) == 0.0


def test_identity_certificate(identity_pair):
    pair = identity_pair
    src = grid_sources(pair.mesh_a, 0.1, pair.domain_a, frame=pair.frame)
    corr = build_phi(pair.archive_a(src), pair.archive_b(), mesh_a=pair.mesh_a, mesh_b=pair.mesh_b)
    interior = src[~pair.mesh_a.boundary_flags[src]]
    probes = interior[pair.domain_a.shape.signed_distance(pair.mesh_a.vertices[interior]) > 0.1][::9][:6]
    cert = isometry_certificate(corr, (pair.domain_a, pair.domain_b), (pair.mesh_a, pair.mesh_b),
                                fields_a=pair.fields_a, fields_b=pair.fields_b, probes=probes)
    lam = np.concatenate([r["lambdas"] for r in cert["probes"]])
    assert np.max(np.abs(lam - 1.0)) <= 1e-10
    assert cert["distance_defect_max"] == 0.0
    assert cert["isometric"]
    for key in ("lambda_tol", "lambda_spread", "lambda_fraction", "distance_scale", "distance_tol_h"):
        assert key in cert["thresholds"]


def test_build_phi_symmetric_on_exact_data(identity_pair):
    pair = identity_pair
    src = grid_sources(pair.mesh_a, 0.1, pair.domain_a, frame=pair.frame)
    a = pair.archive_a(src)
    b = pair.archive_b(src)
    fwd = build_phi(a, b)
    back = build_phi(b, a)
    assert fwd.mutual.all() and back.mutual.all()
    inv = dict(zip(back.sources.tolist(), back.matches.tolist()))
    assert all(inv[int(m)] == int(s) for s, m in zip(fwd.sources, fwd.matches))


def test_gauge_pair_matches_ground_truth(gauge_pair):
    pair = gauge_pair
    src = grid_sources(pair.mesh_a, 0.1, pair.domain_a, frame=pair.frame)
    corr = build_phi(pair.archive_a(src), pair.archive_b(), mesh_a=pair.mesh_a, mesh_b=pair.mesh_b)
    err = gauge_match_errors(corr, pair.gauge) / pair.mesh_a.h
    inner = ~pair.mesh_a.boundary_flags[corr.sources]
    assert np.mean(err[inner] <= 2.0) >= 0.98
    assert boundary_identity_check(corr) <= 2 * pair.frame.spacing


def test_refine_partner_recovers_off_vertex_point(gauge_pair):
    pair = gauge_pair
    mesh = pair.mesh_b
    sampler = FieldSampler(mesh, neighbours=20)
    target = np.array([0.213, -0.147])
    pot, _ = sampler.jet(pair.fields_b.dist, target)
    start = mesh.vertices[mesh.nearest_vertex(target)]
    x = refine_partner(pot, pair.fields_b, start, sampler=sampler)
    assert np.linalg.norm(x - target) < 0.05 * mesh.h
    assert np.linalg.norm(x - target) < np.linalg.norm(start - target)


def test_slide_gauge_violates_boundary_identity():
    dom = scenario_domain("disk")
    g = slide_gauge(0.3)
    pair = prepare_pair(dom, pullback_domain(dom, g), 0.04, frame_spacing=0.04)
    src = grid_sources(pair.mesh_a, 0.2, dom, frame=pair.frame)
    corr = build_phi(pair.archive_a(src), pair.archive_b(), mesh_a=pair.mesh_a, mesh_b=pair.mesh_b)
    assert boundary_identity_check(corr) > 2 * pair.frame.spacing


def test_certificate_rejects_foreign_fields(identity_pair):
    pair = identity_pair
    src = grid_sources(pair.mesh_a, 0.2, pair.domain_a, frame=pair.frame)
    corr = build_phi(pair.archive_a(src), pair.archive_b(), mesh_a=pair.mesh_a, mesh_b=pair.mesh_b)
    other = distance_fields(pair.mesh_a, pair.frame.samples[:5])
    with pytest.raises(FrameMismatch):
        isometry_certificate(corr, (pair.domain_a, pair.domain_b), (pair.mesh_a, pair.mesh_b),
                             fields_a=other, fields_b=pair.fields_b, probes=src[:2])


def test_prepare_pair_shares_frame(gauge_pair):
    pair = gauge_pair
    assert np.array_equal(pair.mesh_a.vertices[pair.frame.samples], pair.mesh_b.vertices[pair.frame.samples])
    assert isinstance(pair.archive_a([1, 2]), DDFArchive)
    other = build_mesh(scenario_domain("disk"), 0.03)
    with pytest.raises(FrameMismatch):
        prepare_pair(scenario_domain("disk"), scenario_domain("disk"), 0.02, mesh_a=other)
