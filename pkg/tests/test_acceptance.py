"""Acceptance suite at h = 1/200, convergence levels 1/50 and 1/100.

The whole suite runs once per session (about 15 minutes on one core). Each
criterion is its own test and prints one PASS/FAIL line with its measured
values; run with ``pytest tests/test_acceptance.py -v -s`` to see them.
"""

from __future__ import annotations

import pytest

from ddrlab.lab import acceptance


@pytest.fixture(scope="module")
def results():
    return acceptance(log=print)


@pytest.fixture(scope="module")
def checks(results):
    return {c.key: c for c in results["checks"]}


def _assert(checks, key):
    check = checks[key]
    print(check.line())
    assert check.passed, check.line()


def test_c1_annulus_distance_oracle(checks):
    _assert(checks, "c1")


def test_c2_exact_metric_space_suite(checks):
    _assert(checks, "c2")


def test_c3_nearest_point_criterion(checks):
    _assert(checks, "c3")


def test_c4_geodesic_membership(checks):
    _assert(checks, "c4")


def test_c5_first_order_derivative(checks):
    _assert(checks, "c5")


def test_c6_gauge_pair_reconstruction(checks):
    _assert(checks, "c6")


def test_c7_negative_control(checks):
    _assert(checks, "c7")


def test_c8_convergence_and_runtime(checks):
    _assert(checks, "c8")


def test_summary(checks):
    print()
    for key in sorted(checks):
        print(checks[key].line())
    assert set(checks) == {f"c{i}" for i in range(1, 9)}
