from __future__ import annotations

import numpy as np
import pytest

from ddrlab.metric_domain import (
    Annulus,
    ConformalBumpMetric,
    Disk,
    EuclideanMetric,
    MeshError,
    MetricDomain,
    Mesh,
    build_mesh,
    bump_gauge,
    pullback_domain,
    scenario_domain,
    scenario_gauge,
    slide_gauge,
    stencil_offsets,
    swirl_gauge,
)


def _fd_jacobian(gauge, pts, eps=1e-6):
    jac = np.empty((len(pts), 2, 2))
    for k in range(2):
        e = np.zeros(2)
        e[k] = eps
        jac[:, :, k] = (gauge.forward(pts + e) - gauge.forward(pts - e)) / (2 * eps)
    return jac


@pytest.mark.parametrize("name", ["disk", "annulus", "dumbbell"])
def test_gauge_jacobian_matches_finite_differences(name, rng):
    dom = scenario_domain(name)
    g = scenario_gauge(name)
    pts = dom.sample_points(200, rng)
    assert np.allclose(g.jacobian(pts), _fd_jacobian(g, pts), atol=1e-7)


@pytest.mark.parametrize("name", ["disk", "annulus", "dumbbell"])
def test_gauge_fixes_boundary_and_maps_domain_into_itself(name, rng):
    dom = scenario_domain(name)
    g = scenario_gauge(name)
    bd = np.vstack(dom.shape.loops(0.01))
    assert np.max(np.linalg.norm(g(bd) - bd, axis=1)) < 1e-12
    pts = dom.sample_points(500, rng)
    assert np.all(dom.shape.contains(g(pts)))
    assert np.allclose(g.inverse(g(pts)), pts, atol=1e-10)


def test_swirl_preserves_area():
    g = swirl_gauge(0.5)
    pts = scenario_domain("disk").sample_points(300, np.random.default_rng(0))
    assert np.allclose(np.linalg.det(g.jacobian(pts)), 1.0, atol=1e-12)


def test_disk_gauge_boundary_metric_determinant_and_tangent():
    # the disk swirl shears at the boundary: only det and the tangential part agree
    dom = scenario_domain("disk")
    pb = pullback_domain(dom, swirl_gauge(0.5))
    th = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    bd = np.column_stack([np.cos(th), np.sin(th)])
    g0, g1 = dom.metric(bd), pb.metric(bd)
    assert np.allclose(np.linalg.det(g1), np.linalg.det(g0), atol=1e-12)
    t = np.column_stack([-np.sin(th), np.cos(th)])
    assert np.allclose(np.einsum("ni,nij,nj->n", t, g1, t), 1.0, atol=1e-12)
    jac = swirl_gauge(0.5).jacobian(np.array([[1.0, 0.0]]))[0]
    assert np.allclose(jac, [[1.0, 0.0], [-1.0, 1.0]], atol=1e-12)


def test_annulus_gauge_metric_equal_on_boundary():
    dom = scenario_domain("annulus")
    pb = pullback_domain(dom, scenario_gauge("annulus"))
    th = np.linspace(0, 2 * np.pi, 50, endpoint=False)
    for r in (0.3, 1.0):
        bd = r * np.column_stack([np.cos(th), np.sin(th)])
        assert np.allclose(pb.metric(bd), dom.metric(bd), atol=1e-12)


def test_slide_gauge_moves_boundary():
    g = slide_gauge()
    assert np.linalg.norm(g(np.array([[1.0, 0.0]]))[0] - [1.0, 0.0]) > 0.1


def test_bump_gauge_rejects_non_invertible_shift():
    with pytest.raises(ValueError):
        bump_gauge(shift=(0.5, 0.0), radius=0.5)


def test_conformal_bump_is_euclidean_outside_support():
    m = ConformalBumpMetric(0.3, center=(0.15, 0.1), radius=0.6)
    far = np.array([[0.95, 0.0], [-0.6, -0.6]])
    assert np.allclose(m(far), np.eye(2))
    assert np.isclose(m(np.array([[0.15, 0.1]]))[0, 0, 0], np.exp(0.6))


def test_stencil_offsets_primitive_and_unique():
    off = stencil_offsets(3)
    assert len(off) == 16  # 32 neighbours
    assert all(np.gcd(abs(i), abs(j)) == 1 for i, j in off)
    assert len({tuple(o) for o in off} | {tuple(-o) for o in off}) == 32


def test_build_mesh_basic_properties():
    dom = scenario_domain("annulus")
    mesh = build_mesh(dom, 0.05)
    assert len(mesh.boundary_order) == 2
    assert np.all(dom.shape.contains(mesh.vertices[~mesh.boundary_flags]))
    assert np.all(mesh.edges[:, 0] < mesh.edges[:, 1])
    # Euclidean edge lengths equal chord lengths
    chord = np.linalg.norm(mesh.vertices[mesh.edges[:, 0]] - mesh.vertices[mesh.edges[:, 1]], axis=1)
    assert np.allclose(mesh.lengths, chord, rtol=1e-12)
    # boundary loops closed with spacing <= h in the metric
    for loop in mesh.boundary_order:
        seg = np.linalg.norm(np.roll(mesh.vertices[loop], -1, axis=0) - mesh.vertices[loop], axis=1)
        assert seg.max() <= 0.05 + 1e-12


def test_mesh_rejects_bad_h():
    with pytest.raises(MeshError):
        build_mesh(scenario_domain("disk"), 0.0)
    with pytest.raises(MeshError):
        build_mesh(scenario_domain("disk"), 0.05, stencil_radius=0)


def test_mesh_json_round_trip(tmp_path):
    mesh = build_mesh(scenario_domain("conformal-disk"), 0.1)
    path = tmp_path / "m.json"
    mesh.to_json(path)
    back = Mesh.from_json(path)
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.edges, mesh.edges)
    assert np.array_equal(back.lengths, mesh.lengths)
    assert np.array_equal(back.vertex_metric, mesh.vertex_metric)
    assert [list(b) for b in back.boundary_order] == [list(b) for b in mesh.boundary_order]
    import json

    doc = json.loads(path.read_text())
    for key in ("vertices", "boundary_flags", "boundary_order", "edges", "h", "domain_kind", "metric_name"):
        assert key in doc


def test_shared_boundary_metric_gives_identical_vertices():
    dom = scenario_domain("disk")
    a = build_mesh(dom, 0.05)
    b = build_mesh(pullback_domain(dom, scenario_gauge("disk")), 0.05, boundary_metric=dom.metric)
    assert np.array_equal(a.vertices, b.vertices)


def test_shapes_signed_distance():
    assert np.isclose(Disk().signed_distance(np.array([[0.5, 0.0]]))[0], 0.5)
    ann = Annulus(0.3)
    assert np.isclose(ann.signed_distance(np.array([[0.5, 0.0]]))[0], 0.2)
    assert not ann.contains(np.array([[0.1, 0.0]]))[0]
    dom = MetricDomain(Disk(), EuclideanMetric())
    assert dom.domain_kind == Disk().kind
