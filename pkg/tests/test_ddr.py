from __future__ import annotations

import numpy as np
import pytest

from ddrlab.ddr import (
    BoundaryFrame,
    DDFArchive,
    DDFMatrix,
    FrameMismatch,
    bilipschitz_profile,
    ddf,
    ddf_from_fields,
    make_frame,
    match,
    match_archives,
    sup_dist,
)
from ddrlab.distance_engine import distance_fields
from ddrlab.metric_domain import build_mesh, scenario_domain


def _toy_frame(k):
    return BoundaryFrame(np.arange(k), np.arange(k, dtype=float), np.zeros(k, dtype=np.int64), np.array([float(k)]))


def test_frame_spacing_and_arc_distance(disk_mid):
    _, mesh, frame, _ = disk_mid
    assert frame.max_gap() <= 0.02 + 1e-12
    assert len(np.unique(frame.samples)) == len(frame)
    L = frame.loop_lengths[0]
    assert np.isclose(L, 2 * np.pi, rtol=1e-3)
    d = frame.arc_distance(0, np.arange(len(frame)))
    assert d[0] == 0 and d.max() <= L / 2 + 1e-12


def test_ddf_properties_and_route_agreement(disk_small):
    _, mesh, frame, fields = disk_small
    x = mesh.nearest_vertex((0.1, 0.3))
    D = ddf_from_fields(fields, frame, x)
    v = D.values
    assert np.all(np.diag(v) == 0.0)
    assert np.array_equal(v, -v.T)
    i, j, k = np.random.default_rng(0).integers(0, len(frame), size=(3, 500))
    assert np.max(np.abs(v[i, k] - v[i, j] - v[j, k])) < 1e-12
    # potential reconstructs the matrix bit for bit
    assert np.array_equal(DDFMatrix.from_potential(frame, x, D.potential()).values, v)
    # graph route: a field sourced at x gives the same matrix up to rounding
    Dg = ddf(mesh, frame, x, solver="graph")
    Dg2 = ddf_from_fields(distance_fields(mesh, frame.samples, "graph"), frame, x)
    assert np.max(np.abs(Dg.values - Dg2.values)) < 1e-12


def test_sup_dist_is_two_lipschitz_graph(disk_small):
    _, mesh, frame, _ = disk_small
    fg = distance_fields(mesh, frame.samples, "graph")
    rng = np.random.default_rng(3)
    xs = rng.choice(np.flatnonzero(~mesh.boundary_flags), 12, replace=False)
    fx = distance_fields(mesh, xs, "graph")
    for a in range(len(xs)):
        for b in range(len(xs)):
            s = sup_dist(ddf_from_fields(fg, frame, xs[a]), ddf_from_fields(fg, frame, xs[b]))
            assert s <= 2 * fx.dist[a, xs[b]] + 1e-12


def test_sup_dist_frame_mismatch():
    a = DDFMatrix.from_potential(_toy_frame(4), 0, np.zeros(4))
    b = DDFMatrix.from_potential(_toy_frame(5), 0, np.zeros(5))
    with pytest.raises(FrameMismatch):
        sup_dist(a, b)


def test_bilipschitz_ratio_bounded(disk_small):
    _, mesh, frame, fields = disk_small
    rows = bilipschitz_profile(fields, frame, 100, rho=0.3, seed=1)
    assert len(rows) > 50
    ratio = rows[:, 1]
    assert ratio.max() <= 2.0 + 1e-6
    assert ratio.min() > 0.2


def test_match_archives_equals_brute_force():
    rng = np.random.default_rng(0)
    k, m, n = 40, 2000, 60
    fr = _toy_frame(k)
    D = rng.normal(size=(m, k)).cumsum(axis=1)
    Q = D[rng.choice(m, n)] + rng.normal(scale=0.2, size=(n, k))
    Q[0] = D[11]
    D[25] = D[11]  # exact tie: smallest index wins
    pos = rng.uniform(size=(m, 2))
    res = match_archives(DDFArchive(fr, np.arange(n), Q), DDFArchive(fr, np.arange(m), D),
                         positions=pos, exclude_radius=0.15)
    osc = np.ptp(Q[:, None, :] - D[None, :, :], axis=2)
    best = osc.argmin(axis=1)
    assert np.array_equal(res["index"], best)
    assert np.array_equal(res["distance"], osc.min(axis=1))
    assert res["index"][0] == 11 and res["distance"][0] == 0.0
    second = [osc[i][np.linalg.norm(pos - pos[best[i]], axis=1) > 0.15].min() for i in range(n)]
    assert np.array_equal(res["second"], second)
    # the matrix-level route agrees
    idx, dist = match([DDFMatrix.from_potential(fr, s, D[s]) for s in range(m)],
                      DDFMatrix.from_potential(fr, -1, Q[3]))
    assert idx == best[3] and np.isclose(dist, osc[3].min(), rtol=0, atol=1e-12)


def test_match_archives_on_mesh_data(disk_small):
    _, mesh, frame, fields = disk_small
    data = DDFArchive.from_fields(fields, frame)
    q = DDFArchive.from_fields(fields, frame, np.arange(0, mesh.n_vertices, 37))
    res = match_archives(q, data)
    assert np.array_equal(data.sources[res["index"]], q.sources)
    assert np.all(res["distance"] == 0.0)


def test_ddf1_round_trip(tmp_path, disk_small):
    _, mesh, frame, fields = disk_small
    arch = DDFArchive.from_fields(fields, frame, [1, 2, 3, int(frame.samples[0])])
    path = tmp_path / "a.ddf1"
    arch.write(path)
    back = DDFArchive.read(path, mesh=mesh)
    assert np.array_equal(back.sources, arch.sources)
    k = len(frame)
    stored = np.frombuffer(path.read_bytes(), "<f8", offset=20 + 8 * (k + 4)).reshape(4, k, k)
    for r in range(len(arch)):
        # the file holds the matrices bit for bit; potentials come back up to a constant
        assert np.array_equal(stored[r], arch.matrix(r).values)
        assert np.max(np.abs(back.matrix(r).values - arch.matrix(r).values)) < 1e-14
    assert np.array_equal(back.frame.arc_positions, frame.arc_positions)
    raw = path.read_bytes()
    assert raw[:4] == b"DDF1"
    assert len(raw) == 20 + 8 * (len(frame) + 4) + 8 * 4 * len(frame) ** 2


def test_ddf1_corrupt_files(tmp_path, disk_small):
    _, mesh, frame, fields = disk_small
    path = tmp_path / "a.ddf1"
    DDFArchive.from_fields(fields, frame, [1, 2]).write(path)
    raw = bytearray(path.read_bytes())
    (tmp_path / "magic.ddf1").write_bytes(b"DDF9" + bytes(raw[4:]))
    with pytest.raises(ValueError, match="magic"):
        DDFArchive.read(tmp_path / "magic.ddf1")
    (tmp_path / "short.ddf1").write_bytes(bytes(raw[:-8]))
    with pytest.raises(ValueError, match="truncated"):
        DDFArchive.read(tmp_path / "short.ddf1")
    # break the cocycle structure of one matrix entry
    off = 20 + 8 * (len(frame) + 2) + 8 * 5
    raw[off:off + 8] = np.float64(123.0).tobytes()
    (tmp_path / "cocycle.ddf1").write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="single vector"):
        DDFArchive.read(tmp_path / "cocycle.ddf1")


def test_archive_frame_mismatch(tmp_path, disk_small):
    _, mesh, frame, fields = disk_small
    path = tmp_path / "a.ddf1"
    DDFArchive.from_fields(fields, frame, [1]).write(path)
    with pytest.raises(FrameMismatch):
        DDFArchive.read(path, frame=_toy_frame(len(frame)))


def test_make_frame_default_uses_every_boundary_vertex():
    mesh = build_mesh(scenario_domain("annulus"), 0.05)
    fr = make_frame(mesh)
    assert len(fr) == len(mesh.boundary_vertices)
    assert set(np.unique(fr.loop_ids)) == {0, 1}
