"""Scaled Rademacher walk, the discretised forward SDE and discrete Malliavin calculus.

Indices follow the 1-based convention of the scheme: ``eps[..., m - 1]`` holds
the sign ``eps_m`` of step ``m`` and ``x[..., k]`` is the state at ``t_k``.
Every routine accepts a leading batch dimension on sign arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

from .errors import DomainError, EllipticityError, NumericError
from .problems import ProblemSpec

#: Gauss-Legendre rule on [0, 1] for the difference-quotient coefficients.
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)
GL_NODES = 0.5 * (_GL_NODES + 1.0)
GL_WEIGHTS = 0.5 * _GL_WEIGHTS

# stream tag in the Philox counter reserved for sign draws
SIGN_STREAM = 1


@dataclass(frozen=True)
class WalkGrid:
    n: int
    T: float = 1.0

    def __post_init__(self) -> None:
        if self.n < 1:
            raise DomainError(f"grid needs n >= 1 steps, got {self.n}")
        if not self.T > 0:
            raise DomainError(f"horizon must be positive, got {self.T}")

    @property
    def h(self) -> float:
        return self.T / self.n

    @cached_property
    def sqrt_h(self) -> float:
        return math.sqrt(self.h)

    @cached_property
    def times(self) -> np.ndarray:
        t = np.arange(self.n + 1) * self.T / self.n
        t[-1] = self.T
        t.setflags(write=False)
        return t

    def t(self, k: int) -> float:
        return float(self.times[k])


@dataclass(frozen=True)
class WalkPath:
    grid: WalkGrid
    eps: np.ndarray
    xwalk: np.ndarray
    start: tuple[int, float]

    def rows(self) -> list[tuple[int, int, float]]:
        """Debug rows ``(k, eps_k, X_k)``; ``eps_0`` is reported as 0."""
        out = []
        for k in range(self.grid.n + 1):
            e = 0 if k == 0 else int(self.eps[k - 1])
            out.append((k, e, float(self.xwalk[k])))
        return out

    def to_csv(self) -> str:
        return "k,eps,x\n" + "".join(f"{k},{e},{x!r}\n" for k, e, x in self.rows())


def sign_generator(seed: int, sample: int = 0, stream: int = SIGN_STREAM) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, sample)``; ``stream`` separates uses."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, sample & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    counter = np.array([0, 0, 0, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def rademacher_path(grid: WalkGrid, seed: int, sample: int = 0) -> np.ndarray:
    """``n`` i.i.d. fair signs as ``int8``, reproducible per ``(seed, sample)``."""
    bits = sign_generator(seed, sample).integers(0, 2, size=grid.n, dtype=np.int8)
    return (2 * bits - 1).astype(np.int8)


def walk_values(grid: WalkGrid, eps: np.ndarray) -> np.ndarray:
    """``B^n_{t_k} = sqrt(h) * sum_{i<=k} eps_i`` for ``k = 0..n``."""
    eps = np.asarray(eps)
    out = np.zeros(eps.shape[:-1] + (grid.n + 1,))
    out[..., 1:] = grid.sqrt_h * np.cumsum(eps, axis=-1)
    return out


def walk_at(grid: WalkGrid, eps: np.ndarray, t: float) -> np.ndarray:
    """Piecewise-constant walk ``B^n_t`` at an arbitrary time."""
    k = min(int(math.floor(t / grid.h + 1e-12)), grid.n)
    return walk_values(grid, eps)[..., k]


def all_sign_paths(n: int) -> np.ndarray:
    """All ``2**n`` sign vectors in lexicographic order, ``eps_1`` most significant, -1 < +1."""
    idx = np.arange(2 ** n, dtype=np.int64)[:, None]
    shifts = np.arange(n - 1, -1, -1, dtype=np.int64)[None, :]
    return (2 * ((idx >> shifts) & 1) - 1).astype(np.int8)


def forward_walk(
    p: ProblemSpec, grid: WalkGrid, eps: np.ndarray, start: tuple[int, float] = (0, 0.0)
) -> WalkPath:
    """Run the discretised forward SDE from ``(k0, x)``.

    States before ``k0`` are left as NaN.  ``x`` may be an array matching the
    batch shape of ``eps``.
    """
    k0, x = start
    eps = np.asarray(eps)
    if eps.shape[-1] != grid.n:
        raise DomainError(f"expected {grid.n} signs, got {eps.shape[-1]}")
    xs = _forward_states(p, grid, eps, k0, x)
    return WalkPath(grid=grid, eps=eps, xwalk=xs, start=(k0, x))


def _forward_states(p: ProblemSpec, grid: WalkGrid, eps: np.ndarray, k0: int, x) -> np.ndarray:
    batch = np.broadcast(eps[..., 0], np.asarray(x, float)).shape
    xs = np.full(batch + (grid.n + 1,), np.nan)
    cur = np.broadcast_to(np.asarray(x, float), batch).astype(float)
    xs[..., k0] = cur
    h, sh = grid.h, grid.sqrt_h
    for j in range(k0 + 1, grid.n + 1):
        tj = grid.t(j)
        cur = cur + h * p.b(tj, cur) + sh * p.sigma(tj, cur) * eps[..., j - 1]
        if not np.all(np.isfinite(cur)):
            raise NumericError(f"non-finite state at step {j}", step=j)
        xs[..., j] = cur
    return xs


# --- path functionals and discrete Malliavin calculus ---------------------

@dataclass(frozen=True)
class PathFunctional:
    """A map ``{-1, 1}^n -> R`` evaluated on sign arrays of shape ``(..., n)``."""

    fn: Callable[[np.ndarray], np.ndarray]
    n: int
    depends: frozenset[int] = field(default_factory=frozenset)

    def __call__(self, eps) -> np.ndarray:
        eps = np.asarray(eps)
        if eps.shape[-1] != self.n:
            raise DomainError(f"functional expects {self.n} signs, got {eps.shape[-1]}")
        return np.asarray(self.fn(eps), float)

    def __add__(self, other: PathFunctional) -> PathFunctional:
        return PathFunctional(lambda e: self(e) + other(e), self.n, self.depends | other.depends)

    def __sub__(self, other: PathFunctional) -> PathFunctional:
        return PathFunctional(lambda e: self(e) - other(e), self.n, self.depends | other.depends)

    def __mul__(self, other) -> PathFunctional:
        if isinstance(other, PathFunctional):
            return PathFunctional(lambda e: self(e) * other(e), self.n, self.depends | other.depends)
        c = float(other)
        return PathFunctional(lambda e: c * self(e), self.n, self.depends)

    __rmul__ = __mul__


def sign_functional(n: int, m: int) -> PathFunctional:
    _check_index(m, n)
    return PathFunctional(lambda e: e[..., m - 1].astype(float), n, frozenset({m}))


def walk_functional(grid: WalkGrid, k: int) -> PathFunctional:
    """``eps -> B^n_{t_k}``."""
    return PathFunctional(lambda e: walk_values(grid, e)[..., k], grid.n, frozenset(range(1, k + 1)))


def state_functional(p: ProblemSpec, grid: WalkGrid, x0: float, k: int) -> PathFunctional:
    """``eps -> X^n_{t_k}`` for the walk started at ``(0, x0)``."""
    return PathFunctional(
        lambda e: _forward_states(p, grid, e, 0, x0)[..., k], grid.n, frozenset(range(1, k + 1))
    )


def _check_index(m: int, n: int) -> None:
    if not 1 <= m <= n:
        raise DomainError(f"index {m} outside 1..{n}")


def shift(F: PathFunctional, m: int, sign: int) -> PathFunctional:
    """Freeze coordinate ``m`` of ``F`` to ``sign``."""
    _check_index(m, F.n)
    if sign not in (-1, 1):
        raise DomainError(f"sign must be +1 or -1, got {sign}")

    def fn(e):
        e = np.array(e, copy=True)
        e[..., m - 1] = sign
        return F(e)

    return PathFunctional(fn, F.n, F.depends - {m})


def discrete_malliavin(F: PathFunctional, m: int, grid: WalkGrid) -> PathFunctional:
    """``(T_{m,+} F - T_{m,-} F) / (2 sqrt(h))``."""
    _check_index(m, F.n)
    up, down = shift(F, m, 1), shift(F, m, -1)
    scale = 1.0 / (2.0 * grid.sqrt_h)
    return PathFunctional(lambda e: (up(e) - down(e)) * scale, F.n, F.depends - {m})


# --- variational / Malliavin walks and the discrete weight ---------------

def variational_walk(
    p: ProblemSpec, grid: WalkGrid, eps: np.ndarray, k: int, x, *, return_states: bool = False
):
    """Discrete variational process of the walk started at ``(t_k, x)``.

    Returns the array ``nabla X_{t_k}, ..., nabla X_{t_n}`` (last axis has
    ``n - k + 1`` entries); with ``return_states`` also the states ``X_{t_k..t_n}``.
    """
    p.require_derivatives()
    if not 0 <= k <= grid.n:
        raise DomainError(f"start index {k} outside 0..{grid.n}")
    eps = np.asarray(eps)
    xs = _forward_states(p, grid, eps, k, x)[..., k:]
    nab = np.empty_like(xs)
    nab[..., 0] = 1.0
    h, sh = grid.h, grid.sqrt_h
    for i, m in enumerate(range(k + 1, grid.n + 1), start=1):
        tm = grid.t(m)
        prev = nab[..., i - 1]
        xm = xs[..., i - 1]
        nab[..., i] = prev + h * p.b_x(tm, xm) * prev + sh * p.sigma_x(tm, xm) * prev * eps[..., m - 1]
    return (nab, xs) if return_states else nab


def difference_quotient(phi_x: Callable, t: float, x_plus: np.ndarray, x_minus: np.ndarray) -> np.ndarray:
    """``int_0^1 phi_x(t, v x_plus + (1 - v) x_minus) dv`` by 8-point Gauss-Legendre."""
    x_plus = np.asarray(x_plus, float)[..., None]
    x_minus = np.asarray(x_minus, float)[..., None]
    pts = GL_NODES * x_plus + (1.0 - GL_NODES) * x_minus
    return np.asarray(phi_x(t, pts), float) @ GL_WEIGHTS


def malliavin_walk(p: ProblemSpec, path: WalkPath, k: int) -> np.ndarray:
    """``D^n_k X^n_{t_m}`` for ``m = k..n`` via the difference-quotient recursion.

    The first entry is ``sigma(t_k, X_{t_{k-1}})``; coefficients use the
    Gauss-Legendre quotient between the paths with ``eps_k`` frozen to +1 and -1.
    """
    p.require_derivatives()
    grid = path.grid
    _check_index(k, grid.n)
    k0, x0 = path.start
    if k0 > k - 1:
        raise DomainError(f"path starts at level {k0}, cannot differentiate in eps_{k}")
    up = np.array(path.eps, copy=True)
    up[..., k - 1] = 1
    down = np.array(path.eps, copy=True)
    down[..., k - 1] = -1
    x_up = _forward_states(p, grid, up, k0, x0)
    x_down = _forward_states(p, grid, down, k0, x0)
    xs = path.xwalk
    out = np.empty(xs.shape[:-1] + (grid.n - k + 1,))
    out[..., 0] = p.sigma(grid.t(k), xs[..., k - 1])
    h, sh = grid.h, grid.sqrt_h
    for i, l in enumerate(range(k + 1, grid.n + 1), start=1):
        tl = grid.t(l)
        bq = difference_quotient(p.b_x, tl, x_up[..., l - 1], x_down[..., l - 1])
        sq = difference_quotient(p.sigma_x, tl, x_up[..., l - 1], x_down[..., l - 1])
        prev = out[..., i - 1]
        out[..., i] = prev + h * bq * prev + sh * sq * prev * path.eps[..., l - 1]
    return out


def discrete_weight(p: ProblemSpec, path: WalkPath, k: int, ell: int) -> np.ndarray:
    """Discrete Malliavin weight ``N^{n,t_k}_{t_ell}`` along ``path``."""
    grid = path.grid
    if not 0 <= k < ell <= grid.n:
        raise DomainError(f"weight needs 0 <= k < ell <= n, got k={k}, ell={ell}")
    return discrete_weights(p, path, k)[..., ell - k - 1]


def discrete_weights(p: ProblemSpec, path: WalkPath, k: int) -> np.ndarray:
    """All weights ``N^{n,t_k}_{t_ell}`` for ``ell = k+1..n`` (last axis)."""
    grid = path.grid
    if path.start[0] > k:
        raise DomainError(f"path starts after level {k}")
    xs = path.xwalk
    nab = variational_walk(p, grid, path.eps, k, xs[..., k])
    ms = np.arange(k + 1, grid.n + 1)
    x_prev = xs[..., k:grid.n]
    sig = np.asarray(p.sigma(grid.times[ms], x_prev), float)
    if np.any(sig < p.delta):
        raise EllipticityError(f"sigma below delta={p.delta} along the path")
    terms = grid.sqrt_h * nab[..., :-1] / sig * path.eps[..., k:]
    return np.cumsum(terms, axis=-1) / (grid.times[ms] - grid.t(k))
