from __future__ import annotations

import dataclasses
import json
import math

import numpy as np
import pytest

from rwfbsde.continuum import euler_fine
from rwfbsde.errors import ConfigurationError, InsufficientDataError, NoReferenceError
from rwfbsde.harness import (
    ExperimentConfig,
    RateReport,
    emit_report,
    non_increasing,
    read_report,
    run_convergence,
    run_zn_vs_zhat,
)
from rwfbsde.problems import builtin_problem, reference_solution
from rwfbsde.rates import fit_slope, usable_rows
from rwfbsde.skorohod import sample_coupled
from rwfbsde.solver import solve_tree
from rwfbsde.walk import WalkGrid, forward_walk

HS = [1 / 8, 1 / 16, 1 / 32, 1 / 64, 1 / 128]


def _small(**kw):
    base = dict(problem="brownian-square", ns=(4, 8, 16), samples=300, fine_factor=32, seed=1)
    base.update(kw)
    return ExperimentConfig(**base)


def test_fit_slope_exact_power_laws():
    fit = fit_slope([(h, 3.0 * h, 0.01 * h) for h in HS])
    assert fit.slope == pytest.approx(1.0, abs=1e-12)
    assert fit.intercept == pytest.approx(math.log(3.0), abs=1e-12)
    half = fit_slope([(h, 0.7 * math.sqrt(h), 0.05 * math.sqrt(h)) for h in HS])
    assert half.slope == pytest.approx(0.5, abs=1e-12)
    assert half.used == 5 and half.as_dict()["ci"][0] <= 0.5 <= half.as_dict()["ci"][1]


def test_fit_slope_coverage_under_jitter():
    rng = np.random.default_rng(7)
    covered = 0
    for _ in range(100):
        rows = [(h, math.sqrt(h) * math.exp(0.05 * rng.standard_normal()), 0.05 * math.sqrt(h)) for h in HS]
        lo, hi = fit_slope(rows).ci
        covered += lo <= 0.5 <= hi
    assert covered >= 90


def test_fit_slope_insufficient():
    with pytest.raises(InsufficientDataError):
        fit_slope([(0.1, 1.0, 0.1), (0.05, 0.5, 0.05)])
    with pytest.raises(InsufficientDataError):
        fit_slope([(0.1, 1.0, 0.1), (0.05, 0.0, 0.05), (0.02, 0.1, 0.01)])


def test_usable_rows_excludes_noisy_and_zero():
    keep, drop = usable_rows([(0.1, 1.0, 0.1), (0.05, 0.5, 0.2), (0.02, 0.0, 0.0), (0.01, 1e-30, 0.0)])
    assert keep == [(0.1, 1.0, 0.1)]
    assert len(drop) == 3


def test_config_validation():
    with pytest.raises(ConfigurationError):
        _small(ns=(1, 4))
    with pytest.raises(ConfigurationError):
        _small(samples=50)
    with pytest.raises(ConfigurationError):
        _small(backend="gpu")
    with pytest.raises(ConfigurationError):
        _small(crossing="exact")
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"problem": "brownian-square", "colour": 3})
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"samples": 200})
    with pytest.raises(ConfigurationError):
        run_convergence(_small(v=1.0))


def test_config_hash_and_round_trip(tmp_path):
    a, b = _small(), _small()
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != _small(seed=2).config_hash()
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(a.to_dict()))
    assert ExperimentConfig.from_file(path) == a
    path.write_text("[1, 2]")
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_file(path)


def test_report_round_trip_and_csv(tmp_path):
    report = run_convergence(_small())
    out = emit_report(report, "json", tmp_path / "r.json")
    back = read_report(out)
    assert back == report
    assert out.read_text() == report.to_json()
    csv_path = emit_report(report, "csv", tmp_path / "r.csv")
    lines = csv_path.read_text().splitlines()
    assert len(lines) == len(report.rows) + 1 == 4
    assert lines[0].startswith("n,h,k,backend,y_err")
    with pytest.raises(ConfigurationError):
        emit_report(report, "xml", tmp_path / "r.xml")
    assert "timestamp" not in json.dumps(report.as_dict())
    assert report.metadata["common_random_numbers"] is True
    assert RateReport.from_dict(json.loads(report.to_json())).rows == report.rows


def test_convergence_brownian_identity():
    report = run_convergence(ExperimentConfig(problem="brownian-identity", ns=(8, 16, 32, 64), samples=1000,
                                              fine_factor=64, seed=3))
    for row in report.rows:
        assert row.z_err < 1e-24
        assert row.k == int(0.5 / row.h)
    assert "z" not in report.slopes
    assert len(report.excluded["z"]) == 4
    assert report.slope("y") >= 0.45


def test_convergence_thread_invariant():
    cfg = _small(problem="sine-coeffs", samples=600)
    one = run_convergence(cfg, threads=1).to_json()
    two = run_convergence(cfg, threads=2).to_json()
    assert one == two


def test_convergence_grid_backend():
    cfg = _small(ns=(16, 32, 64), backend="grid", samples=300)
    report = run_convergence(cfg)
    assert {r.backend for r in report.rows} == {"spatial-grid"}
    assert report.metadata["samples_failed"] == 0


def test_convergence_needs_reference(monkeypatch):
    from rwfbsde import harness

    original = harness.builtin_problem
    monkeypatch.setattr(harness, "builtin_problem",
                        lambda name, params=None: dataclasses.replace(original(name, params), reference=None))
    with pytest.raises(NoReferenceError):
        run_convergence(_small())


def test_error_decomposition_sanity():
    p = builtin_problem("exp-diffusion")
    grid = WalkGrid(16, 1.0)
    v = 0.53
    k = int(v / grid.h)
    sol = solve_tree(p, grid, 0.0)
    total, time_part, space_part = [], [], []
    for s in range(400):
        cs = sample_coupled(p, grid, fine_factor=64, seed=4, sample=s)
        path = euler_fine(p, cs, 0.0)
        xv = path.x[path.index(round(v / cs.delta) * cs.delta)]
        xk = path.x[path.index(grid.t(k))]
        xn = forward_walk(p, grid, cs.eps, (0, 0.0)).xwalk[k]
        y_v = float(reference_solution(p, round(v / cs.delta) * cs.delta, xv)[0])
        y_k = float(reference_solution(p, grid.t(k), xk)[0])
        y_n = float(sol.y_at(k, xn))
        total.append((y_v - y_n) ** 2)
        time_part.append((y_v - y_k) ** 2)
        space_part.append((y_k - y_n) ** 2)
    assert np.mean(total) <= 2 * (np.mean(time_part) + np.mean(space_part))


def test_zhat_rows_zero_generator():
    rows = run_zn_vs_zhat(_small(problem="lipschitz-call", ns=(8, 16, 32)))
    assert all(r["estimate"] == 0.0 and r["std_error"] == 0.0 for r in rows)


def test_zhat_rows_discounted_bond_exact_and_mc_agree():
    exact = run_zn_vs_zhat(_small(problem="discounted-bond", ns=(4, 8), zhat_samples=128, zhat_inner=64))
    mc = run_zn_vs_zhat(_small(problem="discounted-bond", ns=(4, 8), zhat_samples=128, zhat_inner=1))
    assert mc[1]["inner"] == "mc"
    for a, b in zip(exact, mc):
        assert a["inner"] == "exact"
        assert abs(a["estimate"] - b["estimate"]) <= 3 * max(b["std_error"], 1e-30) + 1e-28


def test_zhat_rows_in_report():
    report = run_convergence(_small(problem="sine-coeffs", ns=(4, 8, 16), zhat=True, zhat_samples=128))
    assert all(r.zhat_err is not None and r.zhat_err >= 0 for r in report.rows)
    assert "zhat" in report.excluded


def test_non_increasing():
    rows = [{"estimate": 1.0, "std_error": 0.1}, {"estimate": 1.1, "std_error": 0.1},
            {"estimate": 0.5, "std_error": 0.1}]
    assert non_increasing(rows)
    rows[2]["estimate"] = 2.0
    assert not non_increasing(rows)
