from __future__ import annotations

import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rwfbsde.errors import (
    CapacityError,
    ConfigurationError,
    ConvergenceError,
    DomainCoverageError,
    DomainError,
    StateLookupError,
)
from rwfbsde.problems import ProblemSpec, builtin_problem, registry_names
from rwfbsde.solver import (
    MonotoneCubic,
    brute_force_solution,
    implicit_step,
    one_step_states,
    solve_grid,
    solve_tree,
    y_at,
    z_at,
    zhat_at,
)
from rwfbsde.walk import WalkGrid, all_sign_paths, forward_walk


def _const(c):
    return lambda t, x: np.full(np.broadcast(t, x).shape, float(c))


def _zero_gen(t, x, y, z):
    return np.zeros(np.broadcast(t, x, y, z).shape)


def _with_generator(p, f, L_f):
    return dataclasses.replace(p, f=f, L_f=L_f, zero_generator=False, reference=None)


def _walk_nodes(p, grid, x0, k):
    """``X^n_{t_k}`` on every sign prefix, in the tree's node order."""
    n = grid.n
    path = forward_walk(p, grid, all_sign_paths(n), (0, x0))
    return path.xwalk[:: 2 ** (n - k), k]


def test_one_step_states_examples():
    grid = WalkGrid(4, 1.0)
    up, down = one_step_states(builtin_problem("brownian-identity"), grid, 0, 0.0)
    assert (up, down) == (0.5, -0.5)
    drift = ProblemSpec(name="drift", T=1.0, b=_const(1.0), sigma=_const(0.0), f=_zero_gen, g=lambda x: x)
    up, down = one_step_states(drift, grid, 2, 0.3)
    assert up == down == pytest.approx(0.55, abs=1e-15)
    p = builtin_problem("sine-coeffs")
    grid = WalkGrid(2, 1.0)
    up, down = one_step_states(p, grid, 0, 0.0)
    b, s = 0.1 * math.sin(0.0), 1 + 0.25 * math.cos(0.0)
    assert up == pytest.approx(0.5 * b + math.sqrt(0.5) * s, abs=1e-15)
    assert down == pytest.approx(0.5 * b - math.sqrt(0.5) * s, abs=1e-15)


def test_implicit_step_examples():
    grid = WalkGrid(10, 1.0)
    zero = builtin_problem("brownian-square")
    assert implicit_step(zero, grid, 3, 0.2, (1.5, 0.5)) == 1.0
    assert np.all(solve_tree(zero, WalkGrid(5, 1.0)).iterations == 1)
    bond = builtin_problem("discounted-bond", {"r": 0.05})
    y = implicit_step(bond, grid, 3, 0.2, (0.9, 0.9))
    assert y == pytest.approx(0.9 / (1 + 0.05 * 0.1), abs=1e-14)
    const = _with_generator(zero, lambda t, x, y, z: np.ones(np.broadcast(t, x, y, z).shape), 0.0)
    y = implicit_step(const, grid, 3, 0.2, (1.5, 0.5))
    assert y == pytest.approx(0.1 + 1.0, abs=1e-15)


def test_implicit_step_contraction_and_convergence_errors():
    base = builtin_problem("brownian-square")
    steep = _with_generator(base, lambda t, x, y, z: 20.0 * np.asarray(y), 20.0)
    with pytest.raises(ConfigurationError):
        implicit_step(steep, WalkGrid(10, 1.0), 0, 0.0, (1.0, 1.0))
    slow = _with_generator(base, lambda t, x, y, z: 0.9 * np.sin(y), 0.9)
    with pytest.raises(ConvergenceError) as info:
        implicit_step(slow, WalkGrid(2, 1.0), 0, 0.0, (1.0, 1.0), max_iter=2)
    assert info.value.residual > 0


def test_tree_brownian_square_exact_nodes():
    p = builtin_problem("brownian-square")
    grid = WalkGrid(4, 1.0)
    sol = solve_tree(p, grid, 0.0)
    assert sol.y_at(0, 0.0) == pytest.approx(1.0, abs=1e-14)
    for k in range(5):
        x = sol.states[k]
        assert np.allclose(sol.node_values(k), x ** 2 + 1.0 - grid.t(k), atol=1e-14)
        assert np.array_equal(np.sort(x), np.sort(_walk_nodes(p, grid, 0.0, k)))
    for k in range(4):
        assert np.allclose(sol.node_z(k), 2 * sol.states[k], atol=1e-13)


def test_tree_brownian_identity():
    p = builtin_problem("brownian-identity")
    sol = solve_tree(p, WalkGrid(6, 1.0), 0.5)
    for k in range(6):
        assert np.allclose(sol.node_values(k), sol.states[k], atol=1e-14)
        assert np.allclose(sol.node_z(k), 1.0, atol=1e-13)


def test_tree_discounted_bond():
    r = 0.05
    sol = solve_tree(builtin_problem("discounted-bond", {"r": r}), WalkGrid(8, 1.0))
    assert sol.y_at(0, 0.0) == pytest.approx((1 + r / 8) ** -8, abs=1e-14)


def test_tree_capacity():
    with pytest.raises(CapacityError):
        solve_tree(builtin_problem("brownian-square"), WalkGrid(23, 1.0))
    with pytest.raises(CapacityError):
        solve_tree(builtin_problem("brownian-square"), WalkGrid(8, 1.0), tree_cap=6)


@pytest.mark.parametrize("name", registry_names())
def test_tree_matches_brute_force(name):
    p = builtin_problem(name)
    for n in (2, 5, 8):
        grid = WalkGrid(n, 1.0)
        sol = solve_tree(p, grid, 0.3)
        bf = brute_force_solution(p, grid, 0.3)
        for k in range(n + 1):
            assert np.max(np.abs(sol.node_values(k) - bf.node_y(k))) < 1e-12
        for k in range(n):
            assert np.max(np.abs(sol.node_z(k) - bf.node_z(k))) < 1e-12


def test_brute_force_examples():
    grid = WalkGrid(4, 1.0)
    sq = brute_force_solution(builtin_problem("brownian-square"), grid)
    assert np.allclose(sq.Y[:, 0], 1.0, atol=1e-14)
    bond = brute_force_solution(builtin_problem("discounted-bond", {"r": 0.05}), WalkGrid(6, 1.0))
    assert bond.Y[0, 0] == pytest.approx((1 + 0.05 / 6) ** -6, abs=1e-12)
    ident = brute_force_solution(builtin_problem("brownian-identity"), WalkGrid(6, 1.0))
    assert np.allclose(ident.Z, 1.0, atol=1e-13)
    with pytest.raises(CapacityError):
        brute_force_solution(builtin_problem("brownian-square"), WalkGrid(13, 1.0))


def test_measurability():
    bf = brute_force_solution(builtin_problem("sine-coeffs"), WalkGrid(7, 1.0), 0.1)
    n = 7
    for k in range(n):
        # rows sharing eps_1..eps_k form contiguous blocks
        ys = bf.Y[:, k].reshape(2 ** k, -1)
        zs = bf.Z[:, k].reshape(2 ** k, -1)
        assert np.all(ys == ys[:, :1]) and np.all(zs == zs[:, :1])


@pytest.mark.parametrize("name", ["brownian-square", "exp-diffusion", "lipschitz-call"])
def test_z_zero_generator_is_conditional_malliavin_of_terminal(name):
    p = builtin_problem(name)
    n = 8
    grid = WalkGrid(n, 1.0)
    sol = solve_tree(p, grid, 0.2)
    eps = all_sign_paths(n)
    for k in range(n):
        up = eps.copy()
        up[:, k] = 1
        down = eps.copy()
        down[:, k] = -1
        gT = (p.g(forward_walk(p, grid, up, (0, 0.2)).xwalk[:, -1])
              - p.g(forward_walk(p, grid, down, (0, 0.2)).xwalk[:, -1])) / (2 * grid.sqrt_h)
        cond = gT.reshape(2 ** k, -1).mean(axis=1)
        assert np.max(np.abs(sol.node_z(k) - cond)) < 1e-12


def test_z_at_brownian_square_and_identity():
    grid = WalkGrid(6, 1.0)
    sq = solve_tree(builtin_problem("brownian-square"), grid, 0.0)
    for k in range(6):
        x = sq.states[k]
        assert np.allclose(z_at(sq, k, x), 2 * x, atol=1e-13)
        assert np.allclose(y_at(sq, k, x), x ** 2 + 1 - grid.t(k), atol=1e-13)
    ident = solve_tree(builtin_problem("brownian-identity"), grid, 0.0)
    assert np.allclose(ident.z_at(2, ident.states[2]), 1.0, atol=1e-13)


def test_tree_lookup_errors():
    sol = solve_tree(builtin_problem("brownian-square"), WalkGrid(4, 1.0))
    with pytest.raises(StateLookupError):
        sol.y_at(2, 0.123)
    with pytest.raises(DomainError):
        sol.z_at(4, 0.0)
    with pytest.raises(DomainError):
        sol.y_at(5, 0.0)


def test_tree_residual_invariant():
    sol = solve_tree(builtin_problem("sine-coeffs"), WalkGrid(10, 1.0))
    assert np.all(sol.residuals < sol.fp_tol)
    assert np.array_equal(sol.values[10], builtin_problem("sine-coeffs").g(sol.states[10]))


def test_grid_brownian_square():
    p = builtin_problem("brownian-square")
    sol = solve_grid(p, WalkGrid(64, 1.0), -8.0, 8.0, 4001)
    assert abs(sol.y_at(0, 0.0) - 1.0) < 1e-6
    assert np.all(sol.residuals < sol.fp_tol)
    assert np.array_equal(sol.values[-1], p.g(sol.states[-1]))


@pytest.mark.parametrize("name,tol", [("brownian-square", 1e-10), ("exp-diffusion", 1e-6), ("sine-coeffs", 1e-6)])
def test_grid_matches_tree(name, tol):
    p = builtin_problem(name)
    grid = WalkGrid(10, 1.0)
    tree = solve_tree(p, grid, 0.0)
    fine = solve_grid(p, grid, -8.0, 8.0, 4001)
    worst = max(np.max(np.abs(fine.y_at(k, tree.states[k]) - tree.node_values(k))) for k in range(11))
    assert worst < tol


def test_grid_refinement_reduces_error():
    p = builtin_problem("exp-diffusion")
    grid = WalkGrid(10, 1.0)
    tree = solve_tree(p, grid, 0.0)
    errs = []
    for points in (1001, 2001):
        sol = solve_grid(p, grid, -8.0, 8.0, points)
        errs.append(max(np.max(np.abs(sol.y_at(k, tree.states[k]) - tree.node_values(k))) for k in range(11)))
    assert errs[1] <= 0.5 * errs[0]


def test_grid_linear_terminal_exact():
    sol = solve_grid(builtin_problem("brownian-identity"), WalkGrid(16, 1.0), -4.0, 4.0, 801)
    x = np.linspace(-2, 2, 37)
    for k in range(17):
        assert np.max(np.abs(sol.y_at(k, x) - x)) < 1e-12


def test_grid_coverage():
    sol = solve_grid(builtin_problem("brownian-square"), WalkGrid(8, 1.0), -2.0, 2.0, 401)
    assert sol.truncated and sol.truncated_count > 0
    assert sol.diagnostics()["truncated"] is True
    with pytest.raises(DomainCoverageError):
        sol.y_at(0, 5.0)
    # half a cell beyond the edge is linear extrapolation
    dx = 4.0 / 400
    assert np.isfinite(sol.y_at(0, 2.0 + 0.5 * dx))
    with pytest.raises(DomainError):
        solve_grid(builtin_problem("brownian-square"), WalkGrid(8, 1.0), -1.0, 1.0, 2)


def test_solution_exports():
    sol = solve_tree(builtin_problem("brownian-square"), WalkGrid(3, 1.0))
    lines = sol.to_csv().splitlines()
    assert lines[0] == "level,state,x,u,z"
    assert len(lines) == 1 + 1 + 2 + 4 + 8
    assert "np.float64" not in sol.to_csv()
    diag = json.loads(sol.diagnostics_json())
    assert diag["backend"] == "path-tree" and len(diag["iterations"]) == 3
    on_grid = solve_grid(builtin_problem("brownian-square"), WalkGrid(3, 1.0), -4.0, 4.0, 101)
    assert len(on_grid.to_csv().splitlines()) == 1 + 4 * 101
    with pytest.raises(DomainError):
        on_grid.node_values(0)


@settings(max_examples=30, deadline=None)
@given(
    a=st.floats(0.2, 2.0), c=st.floats(0.0, 2.0), x0=st.floats(-1.0, 1.0), n=st.integers(2, 8),
)
def test_comparison_principle(a, c, x0, n):
    base = builtin_problem("sine-coeffs")
    low = dataclasses.replace(base, f=_zero_gen, zero_generator=True, L_f=0.0,
                              g=lambda x: np.sin(a * np.asarray(x)))
    high = dataclasses.replace(low, g=lambda x: np.sin(a * np.asarray(x)) + c * np.exp(-np.asarray(x) ** 2))
    grid = WalkGrid(n, 1.0)
    u_low = solve_tree(low, grid, x0)
    u_high = solve_tree(high, grid, x0)
    for k in range(n + 1):
        assert np.all(u_low.node_values(k) <= u_high.node_values(k) + 1e-14)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=40))
def test_monotone_cubic_preserves_monotone_data(steps):
    y = np.cumsum(np.abs(steps))
    x = np.linspace(0.0, 1.0, len(y))
    interp = MonotoneCubic(x, y)
    xq = np.linspace(0.0, 1.0, 997)
    vals = interp(xq)
    assert np.all(np.diff(vals) >= -1e-12)
    assert np.allclose(interp(x), y, atol=1e-12)


def test_monotone_cubic_exact_on_quadratic():
    x = np.linspace(-3, 3, 61)
    interp = MonotoneCubic(x, x ** 2 + 1)
    xq = np.linspace(-2.9, 2.9, 333)
    assert np.max(np.abs(interp(xq) - (xq ** 2 + 1))) < 1e-12


def test_zhat_equals_z_when_generator_vanishes():
    for name in ("brownian-square", "exp-diffusion", "lipschitz-call"):
        p = builtin_problem(name)
        grid = WalkGrid(8, 1.0)
        sol = solve_tree(p, grid, 0.1)
        for k in (0, 3, 6):
            x = sol.states[k]
            est = zhat_at(p, sol, k, x, mode="exact")
            assert np.max(np.abs(est.value - sol.node_z(k))) < 1e-12
            assert np.all(est.generator == 0.0)


def test_zhat_discounted_bond():
    p = builtin_problem("discounted-bond")
    grid = WalkGrid(8, 1.0)
    sol = solve_tree(p, grid, 0.0)
    for k in (0, 2, 5):
        est = zhat_at(p, sol, k, sol.states[k], mode="exact")
        assert np.all(est.terminal == 0.0)
        assert np.max(np.abs(est.value)) < 1e-12
        assert np.max(np.abs(est.value - sol.node_z(k))) < 1e-12


def test_zhat_mc_agrees_with_exact():
    p = builtin_problem("sine-coeffs")
    grid = WalkGrid(10, 1.0)
    sol = solve_tree(p, grid, 0.0)
    x = float(sol.states[2][1])
    exact = zhat_at(p, sol, 2, x, mode="exact")
    mc = zhat_at(p, sol, 2, x, mode="mc", samples=4000, seed=3)
    assert isinstance(exact.value, float)
    assert abs(mc.value - exact.value) < 4 * mc.std_error
    again = zhat_at(p, sol, 2, x, mode="mc", samples=4000, seed=3)
    assert again.value == mc.value


def test_zhat_gap_small_for_state_dependent_problem():
    p = builtin_problem("sine-coeffs")
    grid = WalkGrid(8, 1.0)
    sol = solve_tree(p, grid, 0.0)
    est = zhat_at(p, sol, 1, sol.states[1], mode="exact")
    gap = np.abs(est.value - sol.node_z(1))
    assert np.all(gap > 0) and np.max(gap) < 1e-3


def test_zhat_errors():
    p = builtin_problem("brownian-square")
    sol = solve_tree(p, WalkGrid(4, 1.0))
    with pytest.raises(DomainError):
        zhat_at(p, sol, 3, 0.0)
    with pytest.raises(CapacityError):
        zhat_at(p, sol, 0, 0.0, mode="exact", tree_cap=3)
