from __future__ import annotations

import math

import numpy as np
import pytest

from ddrlab.ddr import DDFMatrix, ddf_from_fields
from ddrlab.distance_engine import regular_boundary_window
from ddrlab.rigidity_lab import (
    WindowError,
    angle_recovery,
    dphi_derivative,
    geodesic_membership,
    nearest_point_criterion,
    nearest_samples,
    phi_argmax,
    phi_function,
)


def _closest_sample(mesh, frame, point):
    return int(np.argmin(np.linalg.norm(mesh.vertices[frame.samples] - point, axis=1)))


def test_nearest_point_is_radial_projection(disk_mid):
    _, mesh, frame, fields = disk_mid
    for pt in [(0.5, 0.2), (-0.3, -0.7), (0.0, 0.9)]:
        x = mesh.nearest_vertex(pt)
        radial = mesh.vertices[x] / np.linalg.norm(mesh.vertices[x])
        accepted = nearest_samples(ddf_from_fields(fields, frame, x))
        assert len(accepted) >= 1
        # within one frame spacing of the exact nearest boundary point
        gap = np.linalg.norm(mesh.vertices[frame.samples[accepted]] - radial, axis=1)
        assert gap.min() <= 0.02
        assert nearest_point_criterion(ddf_from_fields(fields, frame, x), int(accepted[0]))


def test_nearest_point_criterion_on_toy_matrix():
    frame_k = 5
    from ddrlab.ddr import BoundaryFrame

    fr = BoundaryFrame(np.arange(frame_k), np.arange(frame_k, dtype=float), np.zeros(frame_k, dtype=np.int64),
                       np.array([5.0]))
    D = DDFMatrix.from_potential(fr, 0, np.array([3.0, 1.0, 2.0, 1.0, 4.0]))
    assert list(nearest_samples(D)) == [1, 3]
    assert not nearest_point_criterion(D, 0)


def test_phi_peaks_at_z_on_the_path(disk_mid):
    dom, mesh, frame, fields = disk_mid
    p = mesh.nearest_vertex((-0.4, 0.1))
    zi = _closest_sample(mesh, frame, (0.6, 0.8))
    z = frame.samples[zi]
    # a vertex on the segment p -> z, half way
    mid = 0.5 * (mesh.vertices[p] + mesh.vertices[z])
    x = mesh.nearest_vertex(mid)
    phi = phi_function(ddf_from_fields(fields, frame, p), ddf_from_fields(fields, frame, x), zi)
    assert frame.arc_distance(zi, phi_argmax(phi)) <= 0.04 + 1e-12
    win = regular_boundary_window(fields, p, dom)
    assert geodesic_membership(ddf_from_fields(fields, frame, p), ddf_from_fields(fields, frame, x), zi, win)
    # a point well off the segment is rejected
    off = mesh.nearest_vertex(mid + np.array([0.25, -0.2]))
    assert not geodesic_membership(ddf_from_fields(fields, frame, p), ddf_from_fields(fields, frame, off), zi, win)


def test_membership_requires_window(disk_mid):
    dom, mesh, frame, fields = disk_mid
    p = mesh.nearest_vertex((0.2, 0.2))
    win = regular_boundary_window(fields, p, dom)
    outside = [i for i, s in enumerate(frame.samples) if int(s) not in win]
    if not outside:
        pytest.skip("window covers the whole frame")
    with pytest.raises(WindowError):
        geodesic_membership(ddf_from_fields(fields, frame, p), ddf_from_fields(fields, frame, p), outside[0], win)


def test_dphi_derivative_matches_exact_cosine(disk_mid):
    _, mesh, frame, fields = disk_mid
    p = mesh.nearest_vertex((0.1, -0.2))
    errs = []
    for a, b in [((1, 0), (0, 1)), ((-0.6, 0.8), (0.8, -0.6)), ((0, -1), (-1, 0))]:
        z1, z2 = _closest_sample(mesh, frame, a), _closest_sample(mesh, frame, b)
        v1 = mesh.vertices[frame.samples[z1]] - mesh.vertices[p]
        v2 = mesh.vertices[frame.samples[z2]] - mesh.vertices[p]
        exact = -1.0 + v1 @ v2 / (np.linalg.norm(v1) * np.linalg.norm(v2))
        got = dphi_derivative(mesh, frame, p, z1, z2, 5 * mesh.h, fields=fields)
        errs.append(abs(got - exact))
    assert max(errs) < 0.05


def test_dphi_derivative_argument_checks(disk_mid):
    _, mesh, frame, fields = disk_mid
    p = mesh.nearest_vertex((0.0, 0.0))
    with pytest.raises(ValueError):
        dphi_derivative(mesh, frame, p, 3, 3, mesh.h, fields=fields)
    with pytest.raises(ValueError):
        dphi_derivative(mesh, frame, p, 3, 9, 6 * mesh.h, fields=fields)


def test_angle_recovery_single_and_identity_pair(disk_mid):
    dom, mesh, frame, fields = disk_mid
    p = mesh.nearest_vertex((0.3, 0.1))
    win = regular_boundary_window(fields, p, dom)
    rep = angle_recovery(mesh, frame, p, win, fields=fields, domain=dom)
    assert len(rep.pairs) == 6
    assert np.all(rep.residuals() < 0.05)
    assert abs(rep.lambda_median - 1.0) < 0.02
    ident = angle_recovery(mesh, frame, p, win, fields=fields, domain=dom, partner=(mesh, fields, p),
                           partner_domain=dom)
    assert np.max(np.abs(ident.lambdas - 1.0)) <= 1e-10
    assert ident.lambda_consistency <= 1e-10
    for q in rep.pairs:
        ang = math.degrees(math.acos(q.lhs + 1.0))
        assert ang >= 45.0 - 1e-9
