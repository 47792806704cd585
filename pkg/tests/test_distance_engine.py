from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from ddrlab.distance_engine import (
    DistanceError,
    FieldSampler,
    detect_cut,
    direction_at,
    distance_field,
    distance_fields,
    geodesic_path,
    path_length,
    read_distance_field,
    regular_boundary_window,
    shortest_path,
    thread_count,
    write_distance_field,
)
from ddrlab.lab import ANNULUS_ORACLE
from ddrlab.metric_domain import build_mesh, scenario_domain


def _scipy_graph(mesh):
    i, j = mesh.edges[:, 0], mesh.edges[:, 1]
    n = mesh.n_vertices
    return csr_matrix((np.concatenate([mesh.lengths, mesh.lengths]), (np.concatenate([i, j]),
                       np.concatenate([j, i]))), shape=(n, n))


@pytest.mark.parametrize("name", ["disk", "annulus", "conformal-disk"])
def test_graph_mode_equals_scipy_dijkstra(name):
    mesh = build_mesh(scenario_domain(name), 0.05)
    src = [0, mesh.n_vertices // 2, int(mesh.boundary_vertices[3])]
    ours = distance_fields(mesh, src, "graph").dist
    ref = dijkstra(_scipy_graph(mesh), indices=src)
    assert np.allclose(ours, ref, rtol=0, atol=1e-12)


def test_upwind_is_consistent_with_edges_and_below_graph():
    mesh = build_mesh(scenario_domain("disk"), 0.05)
    up = distance_field(mesh, 17)
    gr = distance_field(mesh, 17, "graph")
    i, j = mesh.edges[:, 0], mesh.edges[:, 1]
    assert np.all(up.dist[j] <= up.dist[i] + mesh.lengths + 1e-12)
    assert np.all(up.dist[i] <= up.dist[j] + mesh.lengths + 1e-12)
    assert np.all(up.dist <= gr.dist + 1e-12)
    assert up.dist[17] == 0.0


def test_euclidean_disk_distance_close_to_chart_distance():
    mesh = build_mesh(scenario_domain("disk"), 0.02)
    s = mesh.nearest_vertex((0.0, 0.0))
    f = distance_field(mesh, s)
    exact = np.linalg.norm(mesh.vertices - mesh.vertices[s], axis=1)
    assert np.max(np.abs(f.dist - exact)) < 2e-3


@pytest.mark.parametrize("solver,tol", [("upwind", 1e-3), ("graph", 1e-2)])
def test_annulus_oracle_coarse(solver, tol):
    mesh = build_mesh(scenario_domain("annulus"), 0.02)
    a = mesh.nearest_vertex((-0.8, 0.0))
    b = mesh.nearest_vertex((0.8, 0.0))
    assert np.allclose(mesh.vertices[[a, b]], [[-0.8, 0.0], [0.8, 0.0]], atol=1e-12)
    d = distance_field(mesh, a, solver).dist[b]
    assert abs(d - ANNULUS_ORACLE) / ANNULUS_ORACLE < tol
    assert math.isclose(ANNULUS_ORACLE, 1.71388, abs_tol=5e-5)


def test_results_do_not_depend_on_thread_count(monkeypatch):
    mesh = build_mesh(scenario_domain("annulus"), 0.05)
    src = mesh.boundary_vertices[::7]
    a = distance_fields(mesh, src, threads=1)
    b = distance_fields(mesh, src, threads=3)
    assert np.array_equal(a.dist, b.dist) and np.array_equal(a.parent, b.parent)
    monkeypatch.setenv("DDF_THREADS", "2")
    assert thread_count() == 2
    monkeypatch.setenv("DDF_THREADS", "0")
    assert thread_count() >= 1


def test_shortest_path_and_length():
    mesh = build_mesh(scenario_domain("disk"), 0.05)
    f = distance_field(mesh, 5, "graph")
    t = mesh.nearest_vertex((0.5, 0.5))
    path = shortest_path(f, t)
    assert path[0] == t and path[-1] == 5
    assert math.isclose(path_length(mesh, path), f.dist[t], rel_tol=1e-12)


def test_invalid_source_raises():
    mesh = build_mesh(scenario_domain("disk"), 0.1)
    with pytest.raises(DistanceError):
        distance_fields(mesh, [mesh.n_vertices])
    with pytest.raises(ValueError):
        distance_fields(mesh, [0], "bogus")


def test_direction_matches_exact_euclidean(disk_mid):
    dom, mesh, frame, fields = disk_mid
    p = mesh.nearest_vertex((0.2, -0.1))
    worst = 0.0
    for z in frame.samples[::20]:
        v = direction_at(fields.field_of(int(z)), p, dom).vector
        exact = mesh.vertices[z] - mesh.vertices[p]
        exact /= np.linalg.norm(exact)
        worst = max(worst, math.degrees(math.acos(np.clip(v @ exact, -1, 1))))
    assert worst < 2.0


def test_direction_undefined_on_boundary_and_source(disk_mid):
    dom, mesh, frame, fields = disk_mid
    f = fields.field_of(int(frame.samples[0]))
    with pytest.raises(DistanceError):
        direction_at(f, int(frame.samples[1]))
    with pytest.raises(DistanceError):
        direction_at(f, int(frame.samples[0]))


def test_detect_cut_flags_annulus_shadow():
    dom = scenario_domain("annulus")
    mesh = build_mesh(dom, 0.02)
    z = mesh.boundary_order[0][np.argmin(np.linalg.norm(mesh.vertices[mesh.boundary_order[0]] - (1.0, 0.0), axis=1))]
    f = distance_field(mesh, int(z))
    # (-0.65, 0) sits on the cut locus behind the hole; (0.65, 0.3) sees z directly
    assert detect_cut(f, mesh.nearest_vertex((-0.65, 0.0)))
    assert not detect_cut(f, mesh.nearest_vertex((0.65, 0.3)))


def test_regular_window_disk_and_annulus(disk_mid):
    dom, mesh, frame, fields = disk_mid
    w = regular_boundary_window(fields, mesh.nearest_vertex((0.3, 0.2)), dom)
    assert len(w) > 0.9 * len(frame)
    # annulus: a probe near the hole only sees an arc of the inner circle
    adom = scenario_domain("annulus")
    am = build_mesh(adom, 0.02)
    from ddrlab.ddr import make_frame

    af = make_frame(am, 0.02)
    afields = distance_fields(am, af.samples)
    p = am.nearest_vertex((0.5, 0.0))
    w = regular_boundary_window(afields, p, adom)
    assert w.loop == 1 or len(w) < len(af)
    pts = am.vertices[list(w.boundary_samples)]
    assert np.all(np.linalg.norm(pts, axis=1) < 0.31) or np.all(np.linalg.norm(pts, axis=1) > 0.99)
    with pytest.raises(DistanceError):
        regular_boundary_window(afields, int(af.samples[0]), adom)


def test_field_sampler_exact_on_quadratics():
    mesh = build_mesh(scenario_domain("disk"), 0.05)
    x, y = mesh.vertices[:, 0], mesh.vertices[:, 1]
    vals = 1.0 + 2 * x - y + 0.5 * x * x + 0.25 * x * y - y * y
    s = FieldSampler(mesh, neighbours=20)
    q = np.array([0.123, -0.321])
    val, grad = s.jet(vals, q)
    X, Y = q
    assert np.isclose(val[0], 1 + 2 * X - Y + 0.5 * X * X + 0.25 * X * Y - Y * Y, atol=1e-10)
    assert np.allclose(grad[0], [2 + X + 0.25 * Y, -1 + 0.25 * X - 2 * Y], atol=1e-9)


def test_geodesic_path_straight_in_flat_disk(disk_mid):
    dom, mesh, frame, fields = disk_mid
    z = int(frame.samples[40])
    p = mesh.nearest_vertex((-0.2, 0.1))
    curve, verts = geodesic_path(fields.field_of(z), p)
    assert verts[0] == p and verts[-1] == z
    a, b = mesh.vertices[p], mesh.vertices[z]
    u = (b - a) / np.linalg.norm(b - a)
    off = np.abs((curve - a) @ np.array([-u[1], u[0]]))
    assert off.max() < 0.5 * mesh.h
    voff = np.abs((mesh.vertices[verts] - a) @ np.array([-u[1], u[0]]))
    assert voff.max() <= mesh.h / math.sqrt(2) + 0.5 * mesh.h


def test_ddf0_round_trip_and_corruption(tmp_path):
    mesh = build_mesh(scenario_domain("disk"), 0.1)
    f = distance_field(mesh, 3)
    path = tmp_path / "f.ddf0"
    write_distance_field(f, path)
    dist, parent = read_distance_field(path)
    assert np.array_equal(dist, f.dist) and np.array_equal(parent, f.parent)
    raw = path.read_bytes()
    (tmp_path / "bad.ddf0").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        read_distance_field(tmp_path / "bad.ddf0")
    (tmp_path / "short.ddf0").write_bytes(raw[:-5])
    with pytest.raises(ValueError, match="truncated"):
        read_distance_field(tmp_path / "short.ddf0")
