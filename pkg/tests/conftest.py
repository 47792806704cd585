from __future__ import annotations

import numpy as np
import pytest

from ddrlab.ddr import make_frame
from ddrlab.distance_engine import distance_fields
from ddrlab.metric_domain import build_mesh, scenario_domain


@pytest.fixture(scope="session")
def disk_small():
    """Euclidean disk at h = 0.04 with frame-sourced upwind fields."""
    dom = scenario_domain("disk")
    mesh = build_mesh(dom, 0.04)
    frame = make_frame(mesh, 0.04)
    fields = distance_fields(mesh, frame.samples)
    return dom, mesh, frame, fields


@pytest.fixture(scope="session")
def disk_mid():
    """Euclidean disk at h = 0.02, frame spacing 0.02."""
    dom = scenario_domain("disk")
    mesh = build_mesh(dom, 0.02)
    frame = make_frame(mesh, 0.02)
    fields = distance_fields(mesh, frame.samples)
    return dom, mesh, frame, fields


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
