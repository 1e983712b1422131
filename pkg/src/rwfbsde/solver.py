"""Backward finite difference equation for ``u^n`` and the discrete ``(Y^n, Z^n)``.

Two backends share one recursion:

* ``path-tree`` enumerates every reachable state (no recombination is
  assumed) and is exact up to the fixed-point tolerance; it is the ground truth
  for ``n <= tree_cap``.
* ``spatial-grid`` stores ``u^n(t_m, .)`` on a uniform grid and reads children
  by monotone cubic interpolation; it scales to large ``n``.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np

from .errors import (
    CapacityError,
    ConfigurationError,
    ConvergenceError,
    DomainCoverageError,
    DomainError,
    StateLookupError,
)
from .problems import ProblemSpec
from .walk import WalkGrid, _forward_states, all_sign_paths, sign_generator, variational_walk

FP_TOL = 1e-12
MAX_ITER = 100
TREE_CAP = 22
BRUTE_FORCE_CAP = 12
LOOKUP_RTOL = 1e-9
ZHAT_STREAM = 3


def one_step_states(p: ProblemSpec, grid: WalkGrid, m: int, x) -> tuple[np.ndarray, np.ndarray]:
    """Children ``x + h b(t_{m+1}, x) +/- sqrt(h) sigma(t_{m+1}, x)`` of a level-``m`` state."""
    if not 0 <= m < grid.n:
        raise DomainError(f"level {m} outside 0..{grid.n - 1}")
    x = np.asarray(x, float)
    t = grid.t(m + 1)
    base = x + grid.h * p.b(t, x)
    step = grid.sqrt_h * p.sigma(t, x)
    return base + step, base - step


def _check_contraction(p: ProblemSpec, grid: WalkGrid) -> None:
    if grid.h * p.L_f >= 1.0:
        raise ConfigurationError(f"h * L_f = {grid.h * p.L_f:.3g} >= 1: implicit step is not a contraction")


def _fixed_point(p, grid, m, x, u_up, u_down, fp_tol=FP_TOL, max_iter=MAX_ITER):
    u_up = np.asarray(u_up, float)
    u_down = np.asarray(u_down, float)
    if not (np.all(np.isfinite(u_up)) and np.all(np.isfinite(u_down))):
        raise ConvergenceError(f"non-finite continuation values at level {m}")
    t = grid.t(m + 1)
    zbar = (u_up - u_down) / (2.0 * grid.sqrt_h)
    mean = 0.5 * (u_up + u_down)
    y = mean
    if p.zero_generator:
        return y, 1, 0.0
    h = grid.h
    for it in range(1, max_iter + 1):
        y_new = h * p.f(t, x, y, zbar) + mean
        gap = np.max(np.abs(y_new - y) / np.maximum(1.0, np.abs(y_new)), initial=0.0)
        y = y_new
        if gap < fp_tol:
            return y, it, float(gap)
    raise ConvergenceError(f"implicit step at level {m} did not converge in {max_iter} iterations", float(gap))


def implicit_step(
    p: ProblemSpec, grid: WalkGrid, m: int, x, continuation: tuple[Any, Any],
    fp_tol: float = FP_TOL, max_iter: int = MAX_ITER,
) -> np.ndarray:
    """Solve ``y = h f(t_{m+1}, x, y, zbar) + (u_up + u_down) / 2`` by fixed-point iteration.

    ``zbar = (u_up - u_down) / (2 sqrt(h))`` is fixed by the continuation and
    is not iterated.
    """
    _check_contraction(p, grid)
    u_up, u_down = continuation
    y, _, _ = _fixed_point(p, grid, m, np.asarray(x, float), u_up, u_down, fp_tol, max_iter)
    return y


def _residual(p, grid, m, x, u, u_up, u_down) -> float:
    t = grid.t(m + 1)
    zbar = (u_up - u_down) / (2.0 * grid.sqrt_h)
    r = np.abs(u - grid.h * p.f(t, x, u, zbar) - 0.5 * (u_up + u_down)) / np.maximum(1.0, np.abs(u))
    return float(np.max(r, initial=0.0))


class MonotoneCubic:
    """Fritsch-Carlson monotone cubic Hermite interpolant on a uniform grid.

    Node slopes start from centred differences (exact on quadratics), are set
    to zero at local extrema, and are scaled into the circle of radius 3 so
    that monotone data yields a monotone interpolant.
    """

    def __init__(self, x: np.ndarray, y: np.ndarray):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        self.x0 = float(x[0])
        self.dx = float(x[-1] - x[0]) / (len(x) - 1)
        self.y = y
        sec = np.diff(y) / self.dx
        d = np.empty_like(y)
        d[1:-1] = 0.5 * (sec[:-1] + sec[1:])
        d[0] = 0.5 * (3.0 * sec[0] - sec[1]) if len(sec) > 1 else sec[0]
        d[-1] = 0.5 * (3.0 * sec[-1] - sec[-2]) if len(sec) > 1 else sec[-1]
        d[1:-1][sec[:-1] * sec[1:] <= 0.0] = 0.0
        d[0] = d[0] if d[0] * sec[0] > 0.0 else 0.0
        d[-1] = d[-1] if d[-1] * sec[-1] > 0.0 else 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            a = np.where(sec != 0.0, d[:-1] / sec, 0.0)
            b = np.where(sec != 0.0, d[1:] / sec, 0.0)
            r2 = a * a + b * b
            scale = np.where(r2 > 9.0, 3.0 / np.sqrt(r2), 1.0)
        node_scale = np.ones_like(d)
        node_scale[:-1] = scale
        node_scale[1:] = np.minimum(node_scale[1:], scale)
        self.d = d * node_scale

    def __call__(self, xq) -> np.ndarray:
        xq = np.asarray(xq, float)
        last = len(self.y) - 2
        s = (xq - self.x0) / self.dx
        j = np.clip(np.floor(s).astype(np.intp), 0, last)
        t = s - j
        t2 = t * t
        t3 = t2 * t
        return ((2 * t3 - 3 * t2 + 1) * self.y[j] + (t3 - 2 * t2 + t) * self.dx * self.d[j]
                + (3 * t2 - 2 * t3) * self.y[j + 1] + (t3 - t2) * self.dx * self.d[j + 1])


@dataclass(eq=False)
class DiscreteSolution:
    """Solved ``u^n`` field with diagnostics; read-only after construction."""

    problem: ProblemSpec
    grid: WalkGrid
    backend: Literal["path-tree", "spatial-grid"]
    states: list[np.ndarray]
    values: list[np.ndarray]
    iterations: np.ndarray
    residuals: np.ndarray
    fp_tol: float = FP_TOL
    x0: float | None = None
    truncated_count: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def truncated(self) -> bool:
        return self.truncated_count > 0

    # ---- tree helpers
    def _sorted_level(self, k: int):
        key = ("sorted", k)
        if key not in self._cache:
            order = np.argsort(self.states[k], kind="stable")
            self._cache[key] = (self.states[k][order], self.values[k][order])
        return self._cache[key]

    def _tree_lookup(self, k: int, x) -> np.ndarray:
        xs, vs = self._sorted_level(k)
        x = np.asarray(x, float)
        pos = np.clip(np.searchsorted(xs, x), 1, len(xs) - 1) if len(xs) > 1 else np.zeros(x.shape, int)
        if len(xs) > 1:
            left = xs[pos - 1]
            pos = np.where(np.abs(x - left) <= np.abs(xs[pos] - x), pos - 1, pos)
        err = np.abs(xs[pos] - x)
        bad = err > LOOKUP_RTOL * np.maximum(1.0, np.abs(x))
        if np.any(bad):
            raise StateLookupError(f"state {x[bad].ravel()[0]!r} is not a node of tree level {k}")
        return vs[pos]

    # ---- grid helpers
    def _interpolator(self, k: int) -> MonotoneCubic:
        key = ("cubic", k)
        if key not in self._cache:
            self._cache[key] = MonotoneCubic(self.states[k], self.values[k])
        return self._cache[key]

    def _grid_eval(self, k: int, x, strict: bool = True) -> tuple[np.ndarray, int]:
        xs = self.states[k]
        vs = self.values[k]
        x = np.asarray(x, float)
        dx = float(xs[-1] - xs[0]) / (len(xs) - 1)
        lo, hi = xs[0], xs[-1]
        out = np.asarray(self._interpolator(k)(np.clip(x, lo, hi)), float)
        below, above = x < lo, x > hi
        n_out = int(np.count_nonzero(below) + np.count_nonzero(above))
        if n_out:
            if strict and (np.any(x < lo - dx) or np.any(x > hi + dx)):
                raise DomainCoverageError(
                    f"query at level {k} lands more than one cell outside [{lo}, {hi}]"
                )
            out = np.where(below, vs[0] + (x - lo) * (vs[1] - vs[0]) / dx, out)
            out = np.where(above, vs[-1] + (x - hi) * (vs[-1] - vs[-2]) / dx, out)
        return out, n_out

    # ---- public queries
    def u(self, k: int, x) -> np.ndarray:
        if not 0 <= k <= self.grid.n:
            raise DomainError(f"level {k} outside 0..{self.grid.n}")
        if self.backend == "path-tree":
            return self._tree_lookup(k, x)
        return self._grid_eval(k, x)[0]

    def y_at(self, k: int, x) -> np.ndarray:
        return self.u(k, x)

    def z_at(self, k: int, x) -> np.ndarray:
        if not 0 <= k < self.grid.n:
            raise DomainError(f"z is defined for levels 0..{self.grid.n - 1}, got {k}")
        up, down = one_step_states(self.problem, self.grid, k, x)
        return (self.u(k + 1, up) - self.u(k + 1, down)) / (2.0 * self.grid.sqrt_h)

    def node_values(self, k: int) -> np.ndarray:
        """``u^n`` at tree nodes of level ``k`` in sign-prefix order."""
        self._require_tree()
        return self.values[k]

    def node_z(self, k: int) -> np.ndarray:
        """``Z^n_{t_k}`` at tree nodes of level ``k`` in sign-prefix order."""
        self._require_tree()
        nxt = self.values[k + 1]
        return (nxt[1::2] - nxt[0::2]) / (2.0 * self.grid.sqrt_h)

    def _require_tree(self) -> None:
        if self.backend != "path-tree":
            raise DomainError("node-wise access needs the path-tree backend")

    # ---- export
    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("level,state,x,u,z\n")
        for k in range(self.grid.n + 1):
            xs, vs = self.states[k], self.values[k]
            if k < self.grid.n:
                if self.backend == "path-tree":
                    zs = self.node_z(k)
                else:
                    up, down = one_step_states(self.problem, self.grid, k, xs)
                    zs = (self._grid_eval(k + 1, up, strict=False)[0]
                          - self._grid_eval(k + 1, down, strict=False)[0]) / (2.0 * self.grid.sqrt_h)
            else:
                zs = np.full(len(xs), np.nan)
            for i in range(len(xs)):
                buf.write(f"{k},{i},{float(xs[i])!r},{float(vs[i])!r},{float(zs[i])!r}\n")
        return buf.getvalue()

    def diagnostics(self) -> dict[str, Any]:
        return {
            "problem": self.problem.name,
            "backend": self.backend,
            "n": self.grid.n,
            "T": self.grid.T,
            "fp_tol": self.fp_tol,
            "iterations": [int(i) for i in self.iterations],
            "residuals": [float(r) for r in self.residuals],
            "max_residual": float(np.max(self.residuals, initial=0.0)),
            "truncated": self.truncated,
            "truncated_count": self.truncated_count,
        }

    def diagnostics_json(self) -> str:
        return json.dumps(self.diagnostics(), indent=2, sort_keys=True)


def y_at(sol: DiscreteSolution, k: int, x) -> np.ndarray:
    return sol.y_at(k, x)


def z_at(sol: DiscreteSolution, k: int, x) -> np.ndarray:
    return sol.z_at(k, x)


def _sweep(p, grid, states, children, fp_tol, max_iter):
    """Backward sweep; ``children(m, x)`` returns ``(u_up, u_down)`` for level-``m`` states."""
    n = grid.n
    values: list[np.ndarray | None] = [None] * (n + 1)
    values[n] = np.asarray(p.g(states[n]), float).copy()
    iters = np.zeros(n, dtype=int)
    resid = np.zeros(n)
    for m in range(n - 1, -1, -1):
        u_up, u_down = children(m, values[m + 1])
        y, it, _ = _fixed_point(p, grid, m, states[m], u_up, u_down, fp_tol, max_iter)
        iters[m] = it
        resid[m] = _residual(p, grid, m, states[m], y, u_up, u_down)
        if resid[m] > max(fp_tol, 1e-14) * 10:
            raise ConvergenceError(f"post-hoc residual {resid[m]:.3g} at level {m} exceeds tolerance", resid[m])
        values[m] = np.asarray(y, float)
    return values, iters, resid


def solve_tree(
    p: ProblemSpec, grid: WalkGrid, x0: float = 0.0, tree_cap: int = TREE_CAP,
    fp_tol: float = FP_TOL, max_iter: int = MAX_ITER,
) -> DiscreteSolution:
    """Exact solve on the non-recombining tree of states reachable from ``x0``."""
    if grid.n > tree_cap:
        raise CapacityError(f"n={grid.n} exceeds tree_cap={tree_cap}; use solve_grid")
    _check_contraction(p, grid)
    states = [np.array([float(x0)])]
    for m in range(grid.n):
        up, down = one_step_states(p, grid, m, states[m])
        nxt = np.empty(2 * len(up))
        nxt[0::2] = down
        nxt[1::2] = up
        states.append(nxt)

    def children(m, nxt):
        return nxt[1::2], nxt[0::2]

    values, iters, resid = _sweep(p, grid, states, children, fp_tol, max_iter)
    return DiscreteSolution(p, grid, "path-tree", states, values, iters, resid, fp_tol, x0=float(x0))


def solve_grid(
    p: ProblemSpec, grid: WalkGrid, x_min: float = -8.0, x_max: float = 8.0, points: int = 4001,
    fp_tol: float = FP_TOL, max_iter: int = MAX_ITER,
) -> DiscreteSolution:
    """Solve on a uniform spatial grid, reading children by monotone cubic interpolation.

    Children outside the grid are extrapolated linearly; the count is recorded
    in ``truncated_count``.  Queries falling more than one cell outside raise
    :class:`DomainCoverageError`.
    """
    if points < 3:
        raise DomainError("spatial grid needs at least 3 points")
    if not x_max > x_min:
        raise DomainError("empty spatial grid")
    _check_contraction(p, grid)
    xs = np.linspace(x_min, x_max, points)
    xs.setflags(write=False)
    states = [xs] * (grid.n + 1)
    sol = DiscreteSolution(p, grid, "spatial-grid", states, [None] * (grid.n + 1),
                           np.zeros(grid.n, int), np.zeros(grid.n), fp_tol)
    kids = [one_step_states(p, grid, m, xs) for m in range(grid.n)]
    truncated = 0

    def children(m, nxt):
        nonlocal truncated
        sol.values[m + 1] = nxt
        up, down = kids[m]
        u_up, c1 = sol._grid_eval(m + 1, up, strict=False)
        u_down, c2 = sol._grid_eval(m + 1, down, strict=False)
        truncated += c1 + c2
        return u_up, u_down

    values, iters, resid = _sweep(p, grid, states, children, fp_tol, max_iter)
    sol.values = values
    sol.iterations = iters
    sol.residuals = resid
    sol.truncated_count = truncated
    return sol


# --- Z-hat: weight-based approximation of Z^n -----------------------------

@dataclass(frozen=True)
class ZhatEstimate:
    value: float | np.ndarray
    std_error: float | np.ndarray
    terminal: float | np.ndarray
    generator: float | np.ndarray
    samples: int


def _zhat_pairs(p: ProblemSpec, sol: DiscreteSolution, k: int, x, tails: np.ndarray) -> np.ndarray:
    """Pairwise integrands over ``eps_{k+1} = +/-1`` for one continuation tail each.

    ``x`` has batch shape ``B``; ``tails`` has shape ``B + (R, n - k - 1)`` or
    ``(R, n - k - 1)`` and holds ``eps_{k+2..n}``.  Returns three arrays of
    shape ``B + (R,)``:

    * ``terminal``: ``D_{k+1} g(X_T)``;
    * ``weighted``: ``h sum_m (f_m - c) N_m * sigma(t_{k+1}, x)`` (the Z-hat generator term);
    * ``differenced``: ``h sum_m D_{k+1} f_m``, so that ``terminal + differenced``
      averages to ``Z^n_{t_k}`` and ``differenced - weighted`` to ``Z^n - Z-hat^n``.
    """
    grid = sol.grid
    n, h, sh = grid.n, grid.h, grid.sqrt_h
    x = np.asarray(x, float)
    xb = x[..., None]
    tails = np.broadcast_to(tails, np.broadcast(xb, tails[..., 0]).shape + (n - k - 1,))
    batch = tails.shape[:-1]
    sig_k1 = np.asarray(p.sigma(grid.t(k + 1), x), float)[..., None]
    # constant control variate: E_k[c * N] = 0 for any G_k-measurable c
    if not p.zero_generator:
        y0 = np.asarray(sol.y_at(k, x), float)
        z0 = np.asarray(sol.z_at(k, x), float)
    gT = {}
    gen = {}
    fsum = {}
    for s in (1, -1):
        eps = np.ones(batch + (n,), dtype=np.int8)
        eps[..., k] = s
        eps[..., k + 1:] = tails
        nab, xs = variational_walk(p, grid, eps, k, xb, return_states=True)
        gT[s] = np.asarray(p.g(xs[..., -1]), float)
        if p.zero_generator or k + 1 > n - 1:
            gen[s] = np.zeros(batch)
            fsum[s] = np.zeros(batch)
            continue
        js = np.arange(k + 1, n + 1)
        sig = np.asarray(p.sigma(grid.times[js], xs[..., :-1]), float)
        incr = sh * nab[..., :-1] / sig * eps[..., k:]
        weights = np.cumsum(incr, axis=-1)[..., :-1] / (grid.times[k + 1:n] - grid.t(k))
        total = np.zeros(batch)
        plain = np.zeros(batch)
        for i, m in enumerate(range(k + 1, n)):
            xm = xs[..., m - k]
            t_next = grid.t(m + 1)
            fm = np.asarray(p.f(t_next, xm, sol.y_at(m, xm), sol.z_at(m, xm)), float)
            cm = np.asarray(p.f(t_next, x, y0, z0), float)[..., None]
            total = total + h * (fm - cm) * weights[..., i]
            plain = plain + h * fm
        gen[s] = total
        fsum[s] = plain
    terminal = (gT[1] - gT[-1]) / (2.0 * sh)
    weighted = 0.5 * (gen[1] + gen[-1]) * sig_k1
    differenced = (fsum[1] - fsum[-1]) / (2.0 * sh)
    return terminal, weighted, differenced


def zhat_at(
    p: ProblemSpec, sol: DiscreteSolution, k: int, x, mode: Literal["exact", "mc"] = "exact",
    samples: int = 4096, seed: int = 0, sample: int = 0, tree_cap: int = TREE_CAP,
) -> ZhatEstimate:
    """Weight-based approximation ``Z-hat^n_{t_k}`` at state ``x``.

    ``exact`` averages over every continuation ``eps_{k+1..n}``; ``mc`` draws
    ``samples`` continuation tails (each used with both values of ``eps_{k+1}``)
    from the counter-based stream keyed by ``(seed, sample)``.
    """
    grid = sol.grid
    n = grid.n
    if not 0 <= k < n - 1:
        raise DomainError(f"Z-hat needs 0 <= k < n - 1, got k={k}, n={n}")
    if mode == "exact":
        if n > tree_cap:
            raise CapacityError(f"exact Z-hat with n={n} exceeds tree_cap={tree_cap}")
        tails = all_sign_paths(n - k - 1)
    elif mode == "mc":
        rng = sign_generator(seed, sample, stream=ZHAT_STREAM)
        tails = (2 * rng.integers(0, 2, size=(samples, n - k - 1), dtype=np.int8) - 1).astype(np.int8)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    terminal, generator, _ = _zhat_pairs(p, sol, k, x, tails)
    total = terminal + generator
    R = total.shape[-1]
    value = total.mean(axis=-1)
    se = np.zeros_like(value) if mode == "exact" else total.std(axis=-1, ddof=1) / math.sqrt(R)
    out = ZhatEstimate(value, se, terminal.mean(axis=-1), generator.mean(axis=-1), R)
    if np.ndim(value) == 0:
        out = ZhatEstimate(float(value), float(se), float(out.terminal), float(out.generator), R)
    return out


# --- brute-force oracle ---------------------------------------------------

@dataclass(frozen=True)
class BruteForceTables:
    """Per-path tables over all ``2**n`` sign paths (rows in sign-prefix order)."""

    eps: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray

    def node_y(self, k: int) -> np.ndarray:
        n = self.eps.shape[1]
        return self.Y[:: 2 ** (n - k), k]

    def node_z(self, k: int) -> np.ndarray:
        n = self.eps.shape[1]
        return self.Z[:: 2 ** (n - k), k]


def _cond_mean(values: np.ndarray, k: int, n: int) -> np.ndarray:
    """``E[. | eps_1..eps_k]`` by averaging blocks of rows sharing a prefix."""
    block = 2 ** (n - k)
    means = values.reshape(2 ** k, block).mean(axis=1)
    return np.repeat(means, block)


def brute_force_solution(
    p: ProblemSpec, grid: WalkGrid, x0: float = 0.0, fp_tol: float = FP_TOL, max_iter: int = MAX_ITER
) -> BruteForceTables:
    """Solve the discrete BSDE by explicit conditional expectations over all paths.

    Uses the summed form of the backward equation and the ``eps_{k+1}``
    multiplication formula for ``Z^n``; shares no code with the tree sweep.
    """
    n = grid.n
    if n > BRUTE_FORCE_CAP:
        raise CapacityError(f"brute force enumerates 2**n paths; n={n} exceeds {BRUTE_FORCE_CAP}")
    h, sh = grid.h, grid.sqrt_h
    eps = all_sign_paths(n).astype(float)
    R = eps.shape[0]
    X = np.empty((R, n + 1))
    X[:, 0] = x0
    for j in range(1, n + 1):
        tj = j * grid.T / n
        prev = X[:, j - 1]
        X[:, j] = prev + h * np.asarray(p.b(tj, prev), float) + sh * np.asarray(p.sigma(tj, prev), float) * eps[:, j - 1]
    Y = np.empty((R, n + 1))
    Z = np.empty((R, n))
    gT = np.asarray(p.g(X[:, n]), float)
    Y[:, n] = gT
    f_tail = np.zeros(R)  # sum_{m=k+1}^{n-1} f(t_{m+1}, X_m, Y_m, Z_m)
    for k in range(n - 1, -1, -1):
        t_next = (k + 1) * grid.T / n
        e_next = eps[:, k]
        Z[:, k] = _cond_mean(gT * e_next, k, n) / sh + sh * _cond_mean(f_tail * e_next, k, n)
        known = _cond_mean(gT + h * f_tail, k, n)
        y = known.copy()
        for _ in range(max_iter):
            y_new = known + h * np.asarray(p.f(t_next, X[:, k], y, Z[:, k]), float)
            done = np.max(np.abs(y_new - y) / np.maximum(1.0, np.abs(y_new))) < fp_tol
            y = y_new
            if done:
                break
        else:
            raise ConvergenceError(f"brute-force fixed point at level {k} did not converge")
        Y[:, k] = y
        f_tail = f_tail + np.asarray(p.f(t_next, X[:, k], Y[:, k], Z[:, k]), float)
    return BruteForceTables(eps=eps.astype(np.int8), X=X, Y=Y, Z=Z)
