"""Skorohod embedding of the scaled walk into a fine-grid Brownian path.

One fine path per sample drives every walk size: the exit times for step
``sqrt(h)`` are read off the same increments, so the signs for different
``n`` are deterministic functions of one Brownian path (common random numbers).
"""

from __future__ import annotations

import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

from .errors import ConfigurationError, DomainError, RareEventError
from .problems import ProblemSpec
from .rates import SlopeFit, fit_slope, usable_rows
from .walk import WalkGrid, sign_generator, walk_values

BROWNIAN_STREAM = 2
MIN_FINE_FACTOR = 16
DEFAULT_FINE_FACTOR = 256
# extension block as a fraction of T
BLOCKS_PER_T = 4
CHUNK = 256
# -zeta(1/2) / sqrt(2 pi): mean overshoot of a Gaussian walk over a level, in units of sqrt(delta)
OVERSHOOT_SHIFT = 0.5825971579390106
CROSSING_RULES = ("corrected", "plain")


@njit(nogil=True, cache=True)
def _scan_exits(path, sqrt_h, barrier, k, i, level, tau_idx, eps):  # pragma: no cover - compiled
    """Advance the exit-time scan; returns the updated ``(k, i, level)``.

    A step is detected when ``|B - sqrt_h * level| >= barrier``.  ``level`` is
    the integer walk position, so the reference value never accumulates
    rounding.
    """
    n = tau_idx.shape[0]
    last = path.shape[0] - 1
    ref = sqrt_h * level
    while k < n and i < last:
        i += 1
        d = path[i] - ref
        if d >= barrier:
            eps[k] = 1
        elif d <= -barrier:
            eps[k] = -1
        else:
            continue
        level += eps[k]
        ref = sqrt_h * level
        tau_idx[k] = i
        k += 1
    return k, i, level


class FineBrownian:
    """Brownian path on a grid of step ``delta``, extended lazily in blocks.

    Increments come from a counter-based stream keyed by ``(seed, sample)``;
    drawing in blocks continues the same stream, so extension never changes
    values already drawn.
    """

    def __init__(self, T: float, delta: float, seed: int, sample: int = 0, horizon_cap: float | None = None):
        self.T = float(T)
        self.delta = float(delta)
        self.seed = seed
        self.sample = sample
        self.horizon_cap = 8.0 * self.T if horizon_cap is None else float(horizon_cap)
        self.steps_T = int(round(self.T / self.delta))
        self.block = max(1, self.steps_T // BLOCKS_PER_T)
        self.max_steps = int(round(self.horizon_cap / self.delta))
        self._rng = sign_generator(seed, sample, stream=BROWNIAN_STREAM)
        self._incr = np.empty(0)
        self.path = np.zeros(1)
        self._grow(self.steps_T)

    def _grow(self, steps: int) -> None:
        new = math.sqrt(self.delta) * self._rng.standard_normal(steps)
        self._incr = np.concatenate([self._incr, new])
        tail = self.path[-1] + np.cumsum(new)
        self.path = np.concatenate([self.path, tail])

    @property
    def increments(self) -> np.ndarray:
        return self._incr

    @property
    def steps(self) -> int:
        return len(self._incr)

    def extend(self) -> bool:
        """Append one block; False once the horizon cap is reached."""
        room = self.max_steps - self.steps
        if room <= 0:
            return False
        self._grow(min(self.block, room))
        return True


def crossing_barrier(grid: WalkGrid, delta: float, crossing: str = "corrected") -> float:
    """Detection level for a step of size ``sqrt(h)`` monitored every ``delta``.

    ``plain`` detects ``|B - B_{tau_{k-1}}| >= sqrt(h)`` on the fine grid, which
    makes every ``tau_k - tau_{k-1}`` too long by about ``1.17 sqrt(h delta)``.
    ``corrected`` lowers the level by the mean overshoot ``0.5826 sqrt(delta)``
    so the discretely monitored exit mimics the continuous one.
    """
    if crossing == "plain":
        return grid.sqrt_h
    if crossing == "corrected":
        return grid.sqrt_h - OVERSHOOT_SHIFT * math.sqrt(delta)
    raise ConfigurationError(f"crossing must be one of {CROSSING_RULES}, got {crossing!r}")


def embed(fine: FineBrownian, grid: WalkGrid, crossing: str = "corrected") -> tuple[np.ndarray, np.ndarray]:
    """Exit-time indices ``tau_1..tau_n`` (fine-step units) and signs for ``grid``."""
    stride_f = grid.h / fine.delta
    stride = int(round(stride_f))
    if abs(stride_f - stride) > 1e-9 * stride_f:
        raise ConfigurationError(f"fine step {fine.delta} does not divide h={grid.h}")
    tau_idx = np.zeros(grid.n, dtype=np.int64)
    eps = np.zeros(grid.n, dtype=np.int8)
    barrier = crossing_barrier(grid, fine.delta, crossing)
    k, i, level = 0, 0, 0
    while True:
        k, i, level = _scan_exits(fine.path, grid.sqrt_h, barrier, k, i, level, tau_idx, eps)
        if k == grid.n:
            return tau_idx, eps
        if not fine.extend():
            raise RareEventError(
                f"tau_{grid.n} not reached within horizon {fine.horizon_cap} (E tau_n = {grid.T}); "
                f"sample {fine.sample}, reached k={k}"
            )


@dataclass(eq=False)
class CoupledSample:
    """One Brownian path with the embedded walk for a single grid."""

    grid: WalkGrid
    delta: float
    increments: np.ndarray
    tau: np.ndarray
    eps: np.ndarray
    bw_at_t: np.ndarray
    bw_at_tau: np.ndarray
    tau_index: np.ndarray
    path: np.ndarray
    x_fine: np.ndarray | None = field(default=None, repr=False)

    @property
    def fine_factor(self) -> int:
        return int(round(self.grid.h / self.delta))

    def fine_path_until(self, t: float) -> np.ndarray:
        return self.path[: int(round(t / self.delta)) + 1]


def _check_fine(grid: WalkGrid, fine_factor: int, horizon_cap: float | None) -> float:
    if fine_factor < MIN_FINE_FACTOR:
        raise ConfigurationError(f"fine_factor={fine_factor} < {MIN_FINE_FACTOR} cannot resolve sqrt(h) crossings")
    delta = grid.h / fine_factor
    if delta >= grid.h:
        raise ConfigurationError("fine step must be smaller than h")
    if horizon_cap is not None and horizon_cap < 4 * grid.T:
        raise ConfigurationError(f"horizon_cap={horizon_cap} < 4T")
    return delta


def couple(fine: FineBrownian, grid: WalkGrid, crossing: str = "corrected") -> CoupledSample:
    """Embed ``grid``'s walk into an existing fine path."""
    tau_idx, eps = embed(fine, grid, crossing)
    stride = int(round(grid.h / fine.delta))
    bw_t = fine.path[np.arange(grid.n + 1) * stride]
    bw_tau = walk_values(grid, eps)
    return CoupledSample(
        grid=grid, delta=fine.delta, increments=fine.increments, tau=tau_idx * fine.delta,
        eps=eps, bw_at_t=bw_t, bw_at_tau=bw_tau, tau_index=tau_idx, path=fine.path,
    )


def sample_coupled(
    p: ProblemSpec | None, grid: WalkGrid, fine_factor: int = DEFAULT_FINE_FACTOR, seed: int = 0,
    sample: int = 0, horizon_cap: float | None = None, crossing: str = "corrected",
) -> CoupledSample:
    """Draw a fine Brownian path with step ``h / fine_factor`` and embed the walk.

    ``B_{tau_k}`` is snapped to ``B_{tau_{k-1}} +/- sqrt(h)``, so ``bw_at_tau``
    coincides with the walk ``B^n_{t_k}`` built from ``eps``.
    """
    delta = _check_fine(grid, fine_factor, horizon_cap)
    fine = FineBrownian(grid.T, delta, seed, sample, horizon_cap)
    return couple(fine, grid, crossing)


# --- statistics ------------------------------------------------------------

@dataclass(frozen=True)
class StatRow:
    n: int
    h: float
    k: int
    statistic: str
    estimate: float
    std_error: float


@dataclass
class EmbeddingStats:
    rows: list[StatRow]
    slopes: dict[str, SlopeFit]
    excluded: dict[str, list]
    samples: int
    fine_factor: int
    p_norm: float

    def select(self, statistic: str) -> list[StatRow]:
        return [r for r in self.rows if r.statistic == statistic]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("n,h,k,statistic,estimate,std_error\n")
        for r in self.rows:
            buf.write(f"{r.n},{r.h!r},{r.k},{r.statistic},{r.estimate!r},{r.std_error!r}\n")
        return buf.getvalue()

    def as_dict(self) -> dict:
        return {
            "samples": self.samples,
            "fine_factor": self.fine_factor,
            "p_norm": self.p_norm,
            "rows": [r.__dict__ for r in self.rows],
            "slopes": {k: v.as_dict() for k, v in self.slopes.items()},
            "excluded": self.excluded,
        }


def _lp_norm(values: np.ndarray, p_norm: float) -> tuple[float, float]:
    """``(E|V|^p)^{1/p}`` with a delta-method standard error."""
    m = np.abs(values) ** p_norm
    mean = float(np.mean(m))
    se_m = float(np.std(m, ddof=1) / math.sqrt(len(m)))
    if mean == 0.0:
        return 0.0, se_m
    est = mean ** (1.0 / p_norm)
    return est, est * se_m / (p_norm * mean)


def _map_chunks(fn, samples: int, threads: int) -> list:
    starts = list(range(0, samples, CHUNK))
    spans = [(s, min(s + CHUNK, samples)) for s in starts]
    if threads <= 1:
        return [fn(a, b) for a, b in spans]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda ab: fn(*ab), spans))


def embedding_error_stats(
    p: ProblemSpec | None, grids: Sequence[WalkGrid], samples: int = 10_000, p_norm: float = 2.0,
    seed: int = 0, fine_factor: int = DEFAULT_FINE_FACTOR, threads: int = 1, crossing: str = "corrected",
) -> EmbeddingStats:
    """Monte Carlo embedding errors for several walk sizes on shared Brownian paths.

    Statistics per ``n``:

    * ``sup_error``: ``|| sup_t |B^n_t - B_t| ||_p`` (supremum inside the norm,
      over the fine grid on ``[0, T]``);
    * ``sup_of_norm``: ``sup_t || B^n_t - B_t ||_p`` (supremum outside);
    * ``terminal_error``: ``|| B_{tau_n} - B_{t_n} ||_p``;
    * ``tau_mean``: mean of ``tau_k`` for ``k`` in ``{1, n/2, n}``.

    The walk is piecewise constant, ``B^n_t = B^n_{t_k}`` on ``[t_k, t_{k+1})``.
    """
    if samples < 2:
        raise DomainError("need at least 2 samples")
    grids = sorted(grids, key=lambda g: g.n)
    T = grids[0].T
    if any(abs(g.T - T) > 0 for g in grids):
        raise DomainError("grids must share T")
    finest = grids[-1]
    delta = _check_fine(finest, fine_factor, None)
    L = int(round(T / delta))
    for g in grids:
        if L % g.n:
            raise ConfigurationError(f"n={g.n} does not divide the fine grid of {L} steps")
    ks = {g.n: sorted({1, max(1, g.n // 2), g.n}) for g in grids}

    def run(a: int, b: int):
        out = {g.n: {"sup": np.empty(b - a), "term": np.empty(b - a), "tau": np.empty((b - a, len(ks[g.n]))),
                     "pow": np.zeros(L + 1)} for g in grids}
        for s in range(a, b):
            fine = FineBrownian(T, delta, seed, s)
            for g in grids:
                cs = couple(fine, g, crossing)
                bn = np.repeat(cs.bw_at_tau[:-1], L // g.n)
                bn = np.append(bn, cs.bw_at_tau[-1])
                diff = np.abs(bn - fine.path[: L + 1])
                o = out[g.n]
                o["sup"][s - a] = diff.max()
                o["term"][s - a] = cs.bw_at_tau[-1] - cs.bw_at_t[-1]
                o["tau"][s - a] = cs.tau[np.array(ks[g.n]) - 1]
                o["pow"] += diff**p_norm
        return out

    parts = _map_chunks(run, samples, threads)
    rows: list[StatRow] = []
    for g in grids:
        sup = np.concatenate([pt[g.n]["sup"] for pt in parts])
        term = np.concatenate([pt[g.n]["term"] for pt in parts])
        tau = np.concatenate([pt[g.n]["tau"] for pt in parts])
        # chunk sums combined in chunk order, independent of the thread count
        pw = np.sum([pt[g.n]["pow"] for pt in parts], axis=0) / samples
        est, se = _lp_norm(sup, p_norm)
        rows.append(StatRow(g.n, g.h, g.n, "sup_error", est, se))
        i_star = int(np.argmax(pw))
        sup_out = float(pw[i_star] ** (1.0 / p_norm))
        rows.append(StatRow(g.n, g.h, g.n, "sup_of_norm", sup_out, _sup_of_norm_se(parts, g.n, i_star, p_norm, sup_out)))
        est, se = _lp_norm(term, p_norm)
        rows.append(StatRow(g.n, g.h, g.n, "terminal_error", est, se))
        for j, k in enumerate(ks[g.n]):
            col = tau[:, j]
            rows.append(StatRow(g.n, g.h, k, "tau_mean", float(col.mean()), float(col.std(ddof=1) / math.sqrt(samples))))
    slopes, excluded = {}, {}
    for stat in ("sup_error", "sup_of_norm", "terminal_error"):
        keep, drop = usable_rows((r.h, r.estimate, r.std_error) for r in rows if r.statistic == stat)
        excluded[stat] = drop
        if len(keep) >= 3:
            slopes[stat] = fit_slope(keep)
    return EmbeddingStats(rows, slopes, excluded, samples, fine_factor, p_norm)


def _sup_of_norm_se(parts, n, i_star, p_norm, est) -> float:
    # batch-means standard error at the maximising time (chunks are the batches)
    means = np.array([pt[n]["pow"][i_star] / max(1, len(pt[n]["sup"])) for pt in parts])
    sizes = np.array([len(pt[n]["sup"]) for pt in parts], float)
    if len(means) < 2 or est == 0.0:
        return float("nan")
    mean = float(np.sum(means * sizes) / sizes.sum())
    var = float(np.sum(sizes * (means - mean) ** 2) / (len(means) - 1))
    se_mean = math.sqrt(var / sizes.sum())
    return est * se_mean / (p_norm * mean)


def tau_statistics(
    grid: WalkGrid, ks: Sequence[int], samples: int, seed: int = 0,
    fine_factor: int = DEFAULT_FINE_FACTOR, threads: int = 1, crossing: str = "corrected",
) -> dict[int, tuple[float, float]]:
    """Sample mean and standard error of ``tau_k`` for each ``k`` in ``ks``."""
    delta = _check_fine(grid, fine_factor, None)
    idx = np.array(ks) - 1
    if np.any(idx < 0) or np.any(idx >= grid.n):
        raise DomainError(f"k must lie in 1..{grid.n}")

    def run(a, b):
        out = np.empty((b - a, len(ks)))
        for s in range(a, b):
            tau_idx, _ = embed(FineBrownian(grid.T, delta, seed, s), grid, crossing)
            out[s - a] = tau_idx[idx] * delta
        return out

    taus = np.concatenate(_map_chunks(run, samples, threads))
    return {k: (float(taus[:, j].mean()), float(taus[:, j].std(ddof=1) / math.sqrt(samples))) for j, k in enumerate(ks)}
