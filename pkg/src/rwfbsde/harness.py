"""Coupled convergence experiments: discrete ``(Y^n, Z^n)`` against the reference on shared Brownian paths."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .continuum import euler_batch
from .errors import (
    ConfigurationError,
    DomainCoverageError,
    NoReferenceError,
    RareEventError,
)
from .problems import ProblemSpec, builtin_problem, reference_solution
from .rates import SlopeFit, fit_slope, usable_rows
from .skorohod import CROSSING_RULES, FineBrownian, couple
from .solver import DiscreteSolution, TREE_CAP, _zhat_pairs, solve_grid, solve_tree
from .walk import WalkGrid, _forward_states, all_sign_paths, sign_generator

log = logging.getLogger(__name__)

__all__ = [
    "ExperimentConfig",
    "RateReport",
    "RateRow",
    "emit_report",
    "fit_slope",
    "non_increasing",
    "read_report",
    "run_convergence",
    "run_zn_vs_zhat",
]

CHUNK = 256
FAILURE_BUDGET = 1e-3
# the tree backend is exact; above this n the spatial grid is used
AUTO_TREE_MAX = 12
GRID_DX = 0.004
OUTER_STREAM = 5
INNER_STREAM = 6


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines a convergence experiment's output."""

    problem: str
    params: dict = field(default_factory=dict)
    x0: float = 0.0
    v: float = 0.5
    ns: tuple[int, ...] = (8, 16, 32, 64, 128)
    samples: int = 10_000
    fine_factor: int = 256
    seed: int = 0
    backend: str = "auto"
    xgrid: dict | None = None
    zhat: bool = False
    zhat_samples: int = 2_000
    zhat_inner: int = 128
    crossing: str = "corrected"

    def __post_init__(self) -> None:
        object.__setattr__(self, "ns", tuple(sorted(int(n) for n in self.ns)))
        object.__setattr__(self, "params", dict(self.params))
        if not self.ns or min(self.ns) < 2:
            raise ConfigurationError("every n must be >= 2")
        if len(set(self.ns)) != len(self.ns):
            raise ConfigurationError("duplicate n values")
        if self.samples < 100:
            raise ConfigurationError("samples must be >= 100")
        if self.v < 0:
            raise ConfigurationError("v must be >= 0")
        if self.backend not in ("auto", "tree", "grid"):
            raise ConfigurationError(f"unknown backend {self.backend!r}")
        if self.crossing not in CROSSING_RULES:
            raise ConfigurationError(f"unknown crossing rule {self.crossing!r}")
        if self.xgrid is not None and not {"x_min", "x_max", "points"} <= set(self.xgrid):
            raise ConfigurationError("xgrid needs x_min, x_max and points")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ns"] = list(self.ns)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown config keys: {sorted(extra)}")
        if "problem" not in d:
            raise ConfigurationError("config needs a 'problem' entry")
        d = dict(d)
        if "ns" in d:
            d["ns"] = tuple(d["ns"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    @classmethod
    def from_file(cls, path: str | Path) -> ExperimentConfig:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError(f"config {path} must hold a JSON object")
        return cls.from_dict(raw)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class RateRow:
    n: int
    h: float
    k: int
    backend: str
    y_err: float
    y_se: float
    z_err: float
    z_se: float
    total_err: float
    total_se: float
    zhat_err: float | None = None
    zhat_se: float | None = None


CSV_COLUMNS = [f for f in RateRow.__dataclass_fields__]


@dataclass
class RateReport:
    """Per-``n`` mean-square errors, fitted slopes and run metadata."""

    config: dict
    config_hash: str
    rows: list[RateRow]
    slopes: dict[str, dict]
    excluded: dict[str, list]
    metadata: dict

    def as_dict(self) -> dict:
        return {
            "config": self.config,
            "config_hash": self.config_hash,
            "rows": [asdict(r) for r in self.rows],
            "slopes": self.slopes,
            "excluded": self.excluded,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> RateReport:
        return cls(d["config"], d["config_hash"], [RateRow(**r) for r in d["rows"]],
                   d["slopes"], d["excluded"], d["metadata"])

    def slope(self, name: str) -> float:
        return self.slopes[name]["slope"]

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow(["" if getattr(r, c) is None else repr(getattr(r, c)) if isinstance(getattr(r, c), float)
                        else getattr(r, c) for c in CSV_COLUMNS])
        return buf.getvalue()


def emit_report(report: RateReport, fmt: str, path: str | Path) -> Path:
    """Write ``report`` as ``json`` or ``csv``; serialization is deterministic."""
    path = Path(path)
    if fmt == "json":
        text = report.to_json()
    elif fmt == "csv":
        text = report.to_csv()
    else:
        raise ConfigurationError(f"unknown report format {fmt!r}")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path


def read_report(path: str | Path) -> RateReport:
    return RateReport.from_dict(json.loads(Path(path).read_text()))


# --- helpers ---------------------------------------------------------------

def _state_box(p: ProblemSpec, x0: float) -> tuple[float, float]:
    """Grid range by the 6-sigma rule around ``x0``, padded by the drift over ``[0, T]``."""
    probe_t = np.linspace(0.0, p.T, 9)[:, None]
    probe_x = x0 + np.linspace(-10.0, 10.0, 201)[None, :]
    smax = float(np.max(np.abs(p.sigma(probe_t, probe_x))))
    bmax = float(np.max(np.abs(p.b(probe_t, probe_x))))
    half = max(8.0, 6.0 * smax * math.sqrt(p.T) + bmax * p.T + 1.0)
    return x0 - half, x0 + half


def _solve(cfg: ExperimentConfig, p: ProblemSpec, grid: WalkGrid) -> DiscreteSolution:
    use_tree = cfg.backend == "tree" or (cfg.backend == "auto" and grid.n <= AUTO_TREE_MAX)
    if use_tree:
        return solve_tree(p, grid, cfg.x0, tree_cap=TREE_CAP)
    if cfg.xgrid is not None:
        lo, hi, pts = cfg.xgrid["x_min"], cfg.xgrid["x_max"], int(cfg.xgrid["points"])
    else:
        lo, hi = _state_box(p, cfg.x0)
        pts = int(round((hi - lo) / GRID_DX)) + 1
    return solve_grid(p, grid, lo, hi, pts)


def _map(fn, items: Sequence, threads: int) -> list:
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    return float(np.mean(values)), float(np.std(values, ddof=1) / math.sqrt(len(values)))


def _fit(rows: list[tuple[float, float, float]]) -> tuple[SlopeFit | None, list]:
    keep, drop = usable_rows(rows)
    return (fit_slope(keep) if len(keep) >= 3 else None), drop


# --- convergence -----------------------------------------------------------

def run_convergence(cfg: ExperimentConfig, threads: int = 1) -> RateReport:
    """Mean-square errors of ``Y^n_v, Z^n_v`` against ``Y_v, Z_v`` on Skorohod-coupled paths.

    One fine Brownian path per sample (step ``T / (max n * fine_factor)``)
    drives every ``n``: the walk signs come from its exit times, the reference
    state ``X_v`` from a fine Euler scheme on its increments.  ``Y^n_v`` is read
    at ``t_k`` with ``k = floor(v / h)``.  Per-sample errors are stored by
    sample index, so the result does not depend on ``threads``.
    """
    p = builtin_problem(cfg.problem, cfg.params)
    if p.reference is None:
        raise NoReferenceError(f"problem {p.name!r} has no reference solution")
    if not cfg.v < p.T:
        raise ConfigurationError(f"v={cfg.v} must be < T={p.T}")
    grids = [WalkGrid(n, p.T) for n in cfg.ns]
    delta = p.T / (max(cfg.ns) * cfg.fine_factor)
    iv = int(math.floor(cfg.v / delta + 1e-9))
    v_fine = iv * delta
    ks = [int(math.floor(cfg.v / g.h + 1e-9)) for g in grids]
    sols = [_solve(cfg, p, g) for g in grids]
    # reference at the fine-grid time of X_v; equals v whenever v is on the fine grid
    t_ref = v_fine

    def run(chunk: int):
        a = chunk * CHUNK
        b = min(a + CHUNK, cfg.samples)
        m = b - a
        ok = np.ones(m, bool)
        eps = [np.ones((m, g.n), np.int8) for g in grids]
        dB = np.zeros((m, iv))
        for s in range(a, b):
            fine = FineBrownian(p.T, delta, cfg.seed, s)
            try:
                for j, g in enumerate(grids):
                    cs = couple(fine, g, cfg.crossing)
                    # coupling check: signs are the directions of the snapped exits
                    assert np.all(np.diff(cs.bw_at_tau) * cs.eps > 0)
                    eps[j][s - a] = cs.eps
            except RareEventError:
                ok[s - a] = False
            dB[s - a] = fine.increments[:iv]
        X, _ = euler_batch(p, cfg.x0, 0.0, delta, dB, gradient=False)
        xv = X[:, -1]
        y_ref, z_ref = reference_solution(p, t_ref, xv)
        out = []
        for j, g in enumerate(grids):
            xn = _forward_states(p, g, eps[j], 0, cfg.x0)[:, ks[j]]
            ye = np.full(m, np.nan)
            ze = np.full(m, np.nan)
            try:
                ye = (sols[j].y_at(ks[j], xn) - y_ref) ** 2
                ze = (sols[j].z_at(ks[j], xn) - z_ref) ** 2
            except DomainCoverageError:
                for i in range(m):
                    try:
                        ye[i] = (sols[j].y_at(ks[j], xn[i:i + 1])[0] - y_ref[i]) ** 2
                        ze[i] = (sols[j].z_at(ks[j], xn[i:i + 1])[0] - z_ref[i]) ** 2
                    except DomainCoverageError:
                        ok[i] = False
            out.append((ye, ze))
        return ok, out

    parts = _map(run, range(-(-cfg.samples // CHUNK)), threads)
    ok = np.concatenate([q[0] for q in parts])
    failed = int(np.count_nonzero(~ok))
    if failed > FAILURE_BUDGET * cfg.samples:
        raise RareEventError(f"{failed} of {cfg.samples} samples failed (budget {FAILURE_BUDGET:.1%})")
    if failed:
        log.warning("%d samples failed and were dropped from every n", failed)

    zhat_rows = run_zn_vs_zhat(cfg, threads=threads, solutions=sols) if cfg.zhat else None
    rows = []
    for j, g in enumerate(grids):
        ye = np.concatenate([q[1][j][0] for q in parts])[ok]
        ze = np.concatenate([q[1][j][1] for q in parts])[ok]
        y, ys = _mean_se(ye)
        z, zs = _mean_se(ze)
        tot, ts = _mean_se(ye + ze)
        row = RateRow(g.n, g.h, ks[j], sols[j].backend, y, ys, z, zs, tot, ts)
        if zhat_rows is not None:
            row.zhat_err, row.zhat_se = zhat_rows[j]["estimate"], zhat_rows[j]["std_error"]
        rows.append(row)

    slopes, excluded = {}, {}
    for name, col in (("y", "y_err"), ("z", "z_err"), ("total", "total_err"), ("zhat", "zhat_err")):
        if col == "zhat_err" and zhat_rows is None:
            continue
        se_col = col.replace("_err", "_se")
        fit, drop = _fit([(r.h, getattr(r, col), getattr(r, se_col)) for r in rows])
        excluded[name] = drop
        if fit is not None:
            slopes[name] = fit.as_dict()
    metadata = {
        "version": __version__,
        "seed": cfg.seed,
        "samples_used": int(np.count_nonzero(ok)),
        "samples_failed": failed,
        "fine_step": delta,
        "v_effective": t_ref,
        "common_random_numbers": True,
        "crossing": cfg.crossing,
        "reference_kind": getattr(getattr(p.reference, "kind", None), "value", None),
        "expected_exponents": _expected_exponents(p),
    }
    return RateReport(cfg.to_dict(), cfg.config_hash(), rows, slopes, excluded, metadata)


def _expected_exponents(p: ProblemSpec) -> dict[str, float]:
    """Exponents of ``h`` in the theoretical mean-square error bounds."""
    if p.zero_generator:
        return {"y": 0.5, "z": p.alpha / 2, "total": min(0.5, p.alpha / 2)}
    rate = min(0.5, p.alpha)
    return {"y": rate, "z": rate, "total": rate}


# --- Z^n against Z-hat^n ------------------------------------------------------

def run_zn_vs_zhat(
    cfg: ExperimentConfig, threads: int = 1, solutions: Sequence[DiscreteSolution] | None = None,
) -> list[dict[str, Any]]:
    """``E|Z^n_{t_k} - Z-hat^n_{t_k}|^2`` per ``n`` with ``k = floor(v / h)``.

    The gap is estimated through ``Z^n - Z-hat^n = E_k[h sum_m (D_{k+1} f_m
    - f_m N_m sigma)]``, which vanishes identically when ``f = 0``.  When
    ``2**(n - k - 1)`` is small the inner expectation is exact; otherwise the
    squared gap is estimated without bias by the product of two independent
    inner Monte Carlo means.
    """
    p = builtin_problem(cfg.problem, cfg.params)
    out = []
    for j, n in enumerate(cfg.ns):
        grid = WalkGrid(n, p.T)
        k = int(math.floor(cfg.v / grid.h + 1e-9))
        if k >= n - 1:
            raise ConfigurationError(f"v={cfg.v} leaves no room for Z-hat at n={n}")
        if p.zero_generator:
            out.append({"n": n, "h": grid.h, "k": k, "estimate": 0.0, "std_error": 0.0, "inner": "exact"})
            continue
        sol = solutions[j] if solutions is not None else _solve(cfg, p, grid)
        tail = n - k - 1
        exact = 2 ** tail <= cfg.zhat_inner * 2

        def run(chunk: int, sol=sol, grid=grid, k=k, tail=tail, exact=exact):
            a = chunk * 64
            m = min(64, cfg.zhat_samples - a)
            sq = np.empty(m)
            rng = sign_generator(cfg.seed, chunk, stream=OUTER_STREAM)
            head = (2 * rng.integers(0, 2, size=(m, k), dtype=np.int8) - 1).astype(np.int8)
            full = np.ones((m, n), np.int8)
            full[:, :k] = head
            xk = _forward_states(p, grid, full, 0, cfg.x0)[:, k]
            if exact:
                _, wt, df = _zhat_pairs(p, sol, k, xk, all_sign_paths(tail))
                gap = (df - wt).mean(axis=-1)
                return gap**2
            irng = sign_generator(cfg.seed, chunk, stream=INNER_STREAM)
            R = cfg.zhat_inner
            tails = (2 * irng.integers(0, 2, size=(m, 2 * R, tail), dtype=np.int8) - 1).astype(np.int8)
            _, wt, df = _zhat_pairs(p, sol, k, xk, tails)
            gap = df - wt
            sq[:] = gap[:, :R].mean(axis=-1) * gap[:, R:].mean(axis=-1)
            return sq

        vals = np.concatenate(_map(run, range(-(-cfg.zhat_samples // 64)), threads))
        est, se = _mean_se(vals)
        out.append({"n": n, "h": grid.h, "k": k, "estimate": est, "std_error": se,
                    "inner": "exact" if exact else "mc"})
    return out


def non_increasing(rows: Sequence[dict], z: float = 2.0) -> bool:
    """True when no estimate exceeds its predecessor by more than ``z`` combined SEs."""
    for a, b in zip(rows, rows[1:]):
        if b["estimate"] - a["estimate"] > z * math.hypot(a["std_error"], b["std_error"]):
            return False
    return True
