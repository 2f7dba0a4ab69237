import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdehnn.errors import ConfigError, DimensionError
from sdehnn.metrics import (build_calibration_curve, check_grid, cwce, default_grid,
                            empirical_coverage_one_sided, empirical_coverage_two_sided, ecpe, epiw,
                            evaluate, r2, r_cwce, rmse)

from oracles import loop_cwce, loop_ecpe, loop_epiw, loop_r2, loop_r_cwce, loop_rmse, norm_cdf


def test_default_grid():
    g = default_grid()
    assert len(g) == 19 and g[0] == 0.05 and g[-1] == 0.95
    assert np.all(np.diff(g) > 0)


@pytest.mark.parametrize("grid", [[], [0.5, 0.4], [0.0, 0.5], [0.5, 1.0]])
def test_bad_grids(grid):
    with pytest.raises(ConfigError):
        check_grid(grid)


def test_one_sided_coverage_examples():
    assert empirical_coverage_one_sided([1.0, 1.0], [0.0, 2.0]) == 0.5
    assert empirical_coverage_one_sided([5.0, 5.0], [0.0, 2.0]) == 1.0
    with pytest.raises(DimensionError):
        empirical_coverage_one_sided([], [])


def test_two_sided_coverage_examples():
    y = [0.0, 5.0, 10.0]
    assert empirical_coverage_two_sided([-1, 0, 9], [1, 1, 11], y) == 2 / 3
    assert empirical_coverage_two_sided([-100] * 3, [100] * 3, y) == 1.0
    assert empirical_coverage_two_sided([1, 1, 1], [1, 1, 1], y) == 0.0
    with pytest.raises(ConfigError):
        empirical_coverage_two_sided([1.0], [0.0], [0.5])


def test_cwce_and_ecpe_hand_case():
    assert abs(cwce([0.5, 0.9], [0.4, 1.0]) - 0.14) < 1e-15
    assert abs(ecpe([0.5, 0.9], [0.4, 1.0]) - 0.1) < 1e-15
    g = default_grid()
    assert cwce(g, g) == 0.0 and ecpe(g, g) == 0.0
    with pytest.raises(DimensionError):
        cwce([0.5, 0.9], [0.4])


def test_r_cwce_hand_cases():
    assert abs(r_cwce([0.0, 2.0], [0.0, 1.0], 0.14) - 0.07) < 1e-15
    assert r_cwce([1.0, 3.0], [1.0, 3.0], 0.3) == 0.0
    assert abs(r_cwce([1.0, 3.0], [2.0, 2.0], 0.3) - 0.3) < 1e-15
    with pytest.raises(ConfigError):
        r_cwce([1.0, 1.0], [1.0, 2.0], 0.1)


def test_rmse_r2_hand_cases():
    assert abs(rmse([0.0, 2.0], [0.0, 0.0]) - math.sqrt(2)) < 1e-15
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0 and r2([1.0, 2.0], [1.0, 2.0]) == 1.0
    assert r2([1.0, 3.0], [2.0, 2.0]) == 0.0
    with pytest.raises(DimensionError):
        rmse([1.0], [1.0, 2.0])


def test_epiw_cases():
    assert epiw([0, 0], [1, 3]) == 2.0
    assert epiw([1, 4], [3, 6]) == 2.0


def test_epiw_scales_with_target_range():
    # widths in data units are the scaled widths times (max - min)
    lo, hi = np.array([0.1, 0.2]), np.array([0.3, 0.7])
    lo_u, hi_u = 5 + lo * 40, 5 + hi * 40
    assert abs(epiw(lo_u, hi_u) - 40 * epiw(lo, hi)) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 200), st.integers(0, 2**31 - 1))
def test_metrics_match_loop_oracles(n, seed):
    r = np.random.default_rng(seed)
    y, yh = r.standard_normal(n), r.standard_normal(n)
    lo = yh - r.uniform(0, 2, n)
    hi = yh + r.uniform(0, 2, n)
    grid = default_grid()
    cov = r.uniform(0, 1, grid.size)
    c = cwce(grid, cov)
    assert abs(c - loop_cwce(grid.tolist(), cov.tolist())) < 1e-12
    assert abs(ecpe(grid, cov) - loop_ecpe(grid.tolist(), cov.tolist())) < 1e-12
    assert abs(rmse(y, yh) - loop_rmse(y.tolist(), yh.tolist())) < 1e-12
    assert abs(r2(y, yh) - loop_r2(y.tolist(), yh.tolist())) < 1e-12
    assert abs(epiw(lo, hi) - loop_epiw(lo.tolist(), hi.tolist())) < 1e-12
    assert abs(r_cwce(y, yh, c) - loop_r_cwce(y.tolist(), yh.tolist(), c)) < 1e-12
    assert abs(r_cwce(y, yh, c) - (1 - r2(y, yh)) * c) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 100), st.integers(0, 2**31 - 1))
def test_metric_invariants(n, seed):
    r = np.random.default_rng(seed)
    y, yh, var = r.standard_normal(n), r.standard_normal(n), r.uniform(0.1, 2, n)
    report, curve = evaluate(y, yh, var)
    assert report.cwce >= 0 and report.ecpe >= 0 and report.epiw >= 0 and report.rmse >= 0
    assert report.r2 <= 1
    assert report.ecpe <= np.max(np.abs(curve.coverages - curve.levels)) + 1e-15
    assert np.all((curve.coverages >= 0) & (curve.coverages <= 1))
    perm = r.permutation(n)
    shuffled, _ = evaluate(y[perm], yh[perm], var[perm])
    for key in ("rmse", "r2", "cwce", "r_cwce", "ecpe", "epiw"):
        assert abs(getattr(shuffled, key) - getattr(report, key)) < 1e-12


@pytest.mark.parametrize("side", ["one_sided", "two_sided_central"])
def test_coverage_nondecreasing(side, rng):
    y, mu, var = rng.standard_normal(300), rng.standard_normal(300), rng.uniform(0.2, 3, 300)
    curve = build_calibration_curve(mu, var, y, side=side)
    assert np.all(np.diff(curve.coverages) >= 0)


def test_single_point_coverages_are_binary():
    curve = build_calibration_curve([0.0], [1.0], [0.3])
    assert set(curve.coverages.tolist()) <= {0.0, 1.0}


@pytest.mark.parametrize("side", ["one_sided", "two_sided_central"])
def test_oracle_predictor_is_calibrated(side):
    r = np.random.default_rng(0)
    n = 10_000
    mu, sd = r.uniform(-3, 3, n), r.uniform(0.5, 2, n)
    y = mu + sd * r.standard_normal(n)
    curve = build_calibration_curve(mu, sd ** 2, y, side=side)
    assert np.all(np.abs(curve.coverages - curve.levels) < 0.015)


def test_one_sided_coverage_against_cdf_oracle():
    # y exactly at known z-scores: coverage is the fraction with cdf(z) <= p
    z = np.linspace(-2.5, 2.5, 101)
    curve = build_calibration_curve(np.zeros(101), np.ones(101), z, side="one_sided")
    expected = [np.mean([norm_cdf(v) <= p for v in z]) for p in curve.levels]
    assert np.array_equal(curve.coverages, expected)


def test_report_and_curve_files(tmp_path, rng):
    y, mu = rng.standard_normal(50), rng.standard_normal(50)
    report, curve = evaluate(y, mu, np.ones(50), cwce_scale=100.0)
    report.to_json(tmp_path / "m.json")
    data = json.loads((tmp_path / "m.json").read_text())
    for key in ("rmse", "r2", "cwce", "r_cwce", "ecpe", "epiw", "n", "side", "grid"):
        assert key in data
    assert data["cwce_scale"] == 100.0 and data["n"] == 50
    plain, _ = evaluate(y, mu, np.ones(50))
    assert abs(report.cwce - 100 * plain.cwce) < 1e-10
    curve.to_csv(tmp_path / "c.csv")
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0] == ["p", "empirical_coverage"] and len(rows) == 20


def test_unknown_side():
    with pytest.raises(ConfigError):
        build_calibration_curve([0.0], [1.0], [0.0], side="left")
