"""Acceptance criteria at their stated tolerances; one PASS/FAIL line each."""

from __future__ import annotations

import pytest

from cmfc import acceptance


@pytest.fixture(scope="module")
def cache():
    return {}


def report(capsys, res):
    with capsys.disabled():
        print("\n" + res.line())
    return res


def test_criterion_1_unconstrained_lq(cache, capsys):
    res = report(capsys, acceptance.unconstrained_lq(0, cache))
    d = res.details
    assert d["mc_vs_riccati"] < 0.01
    assert d["riccati_vs_oracle"] < 0.005
    assert d["mc_runtime"] < 60.0
    assert res.passed


def test_criterion_2_zero_cost(capsys):
    res = report(capsys, acceptance.zero_cost())
    assert res.details["control_rms"] < 1e-10 and res.details["adjoint_rms"] < 1e-10
    assert res.passed


def test_criterion_3_constrained_lq(cache, capsys):
    res = report(capsys, acceptance.constrained_lq(0, cache))
    d = res.details
    assert d["max_violation"] <= 1e-12
    assert d["slackness"] < 1e-3 * (1 + d["eta_norm"])
    assert d["eta_min"] >= 0
    assert d["cost"] >= d["unconstrained_cost"] - 2 * d["unconstrained_halfwidth"]
    assert d["runtime"] < 120.0
    assert res.passed


def test_criterion_4_fj_suite(capsys):
    res = report(capsys, acceptance.fj_suite())
    assert len(res.details) == 8
    assert res.details["p3_abnormal_square"]["r0"] == 0.0
    assert res.passed


def test_criterion_5_bridge(capsys):
    res = report(capsys, acceptance.bridge())
    assert 0.8 <= res.details["slope"] <= 1.2
    assert res.details["transversality_relative"] <= 0.05
    assert res.elapsed < 10.0
    assert res.passed


def test_criterion_6_frechet(capsys):
    res = report(capsys, acceptance.frechet(0))
    assert len(res.details["relative_errors"]) == 5
    assert max(res.details["relative_errors"]) < 1e-4
    assert res.passed


def test_criterion_7_picard(capsys):
    res = report(capsys, acceptance.picard())
    assert res.details["rms_gap_to_direct"] < 1e-10
    assert res.passed


def test_criterion_8_martingale(capsys):
    res = report(capsys, acceptance.martingale())
    assert res.details["max_y_error"] < 1e-8 and res.details["max_z_error"] < 1e-8
    assert res.passed


def test_criterion_9_mfg(capsys):
    res = report(capsys, acceptance.mfg(0))
    assert res.details["decoupled_residuals"] == [0.0]
    assert res.details["coupled_residuals"][-1] < 1e-3
    assert res.details["coupled_outer_iterations"] <= 20
    assert res.passed
