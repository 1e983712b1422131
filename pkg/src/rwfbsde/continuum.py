"""Continuous-side reference quantities: fine Euler paths, Malliavin weights, a PDE solver."""

from __future__ import annotations

import io
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.sparse import csc_matrix
from scipy.sparse.linalg import splu

from .errors import CapabilityError, ConvergenceError, DomainError, NoReferenceError, NumericError
from .problems import ProblemSpec, reference_solution
from .skorohod import CoupledSample
from .walk import sign_generator

NORMAL_STREAM = 4
CHUNK = 1024
PICARD_TOL = 1e-10
PICARD_CAP = 50


# --- fine Euler paths --------------------------------------------------------

def euler_batch(p: ProblemSpec, x0, t0: float, dt: float, increments: np.ndarray, gradient: bool = True):
    """Euler-Maruyama for ``X`` and its variational process over rows of Brownian increments.

    ``increments`` has shape ``(..., steps)``; returns ``(X, gradX)`` with a
    trailing axis of ``steps + 1`` time points (``gradX`` is None when not
    requested).  Coefficients are frozen at the left end of each step.
    """
    dB = np.asarray(increments, float)
    steps = dB.shape[-1]
    X = np.empty(dB.shape[:-1] + (steps + 1,))
    X[..., 0] = x0
    G = None
    if gradient:
        p.require_derivatives()
        G = np.empty_like(X)
        G[..., 0] = 1.0
    cur = X[..., 0].copy()
    gcur = None if G is None else G[..., 0].copy()
    for j in range(steps):
        t = t0 + j * dt
        db = dB[..., j]
        if gcur is not None:
            gcur = gcur + p.b_x(t, cur) * gcur * dt + p.sigma_x(t, cur) * gcur * db
        cur = cur + p.b(t, cur) * dt + p.sigma(t, cur) * db
        if not np.all(np.isfinite(cur)) or (gcur is not None and not np.all(np.isfinite(gcur))):
            raise NumericError(f"non-finite Euler state at fine step {j + 1}", step=j + 1)
        X[..., j + 1] = cur
        if G is not None:
            G[..., j + 1] = gcur
    return X, G


@dataclass(eq=False)
class FinePath:
    """Fine Euler path of ``X`` and ``gradX`` on ``[t0, t0 + steps * delta]``."""

    delta: float
    t0: float
    x: np.ndarray
    grad: np.ndarray | None
    increments: np.ndarray
    sample: CoupledSample | None = field(default=None, repr=False)

    @property
    def positive_gradient(self) -> bool:
        return self.grad is None or bool(np.all(self.grad > 0))

    def index(self, t: float) -> int:
        i = (t - self.t0) / self.delta
        j = int(round(i))
        if abs(i - j) > 1e-9 * max(1.0, abs(i)) or not 0 <= j < self.x.shape[-1]:
            raise DomainError(f"time {t} is not on the fine grid of this path")
        return j


def euler_fine(p: ProblemSpec, sample: CoupledSample, x0: float, until: float | None = None) -> FinePath:
    """Fine Euler path driven by the sample's own Brownian increments; fills ``sample.x_fine``."""
    T = sample.grid.T if until is None else until
    steps = int(round(T / sample.delta))
    if steps > len(sample.increments):
        raise DomainError("sample increments do not cover the requested horizon")
    dB = sample.increments[:steps]
    X, G = euler_batch(p, x0, 0.0, sample.delta, dB, gradient=p.has_derivatives)
    sample.x_fine = X
    return FinePath(sample.delta, 0.0, X, G, dB, sample)


def _weights_cumulative(p: ProblemSpec, t0: float, dt: float, X, G, dB) -> np.ndarray:
    """``N^{t0}_{t0 + j dt}`` for ``j = 1..steps`` as left-point Ito sums."""
    steps = dB.shape[-1]
    times = t0 + dt * np.arange(steps)
    sig = p.sigma(times, X[..., :-1])
    if np.any(np.abs(sig) < p.delta * (1 - 1e-12)):
        raise DomainError("sigma fell below the ellipticity bound along the path")
    integrand = G[..., :-1] / (sig * G[..., :1]) * dB
    return np.cumsum(integrand, axis=-1) / (dt * np.arange(1, steps + 1))


def malliavin_weight(p: ProblemSpec, path: FinePath, t: float, s: float) -> np.ndarray:
    """``N^t_s = (s - t)^{-1} int_t^s gradX_r / (sigma(r, X_r) gradX_t) dB_r`` on the fine grid."""
    if not t < s:
        raise DomainError(f"need t < s, got t={t}, s={s}")
    if path.grad is None:
        p.require_derivatives()
    i, j = path.index(t), path.index(s)
    X = path.x[..., i: j + 1]
    G = path.grad[..., i: j + 1]
    dB = path.increments[..., i:j]
    return _weights_cumulative(p, t, path.delta, X, G, dB)[..., -1]


# --- weight-based Z estimator -------------------------------------------------

@dataclass(frozen=True)
class WeightEstimate:
    estimate: float
    std_error: float
    samples: int
    mode: str
    steps: int
    terminal: float
    generator: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def z_weight_estimator(
    p: ProblemSpec, t: float, x: float, samples: int = 100_000, seed: int = 0, steps: int = 128,
    mode: Literal["weight", "gradient"] = "weight", threads: int = 1,
) -> WeightEstimate:
    """Monte Carlo estimate of ``Z_t`` at ``X_t = x`` by the Malliavin-weight representation.

    ``weight`` uses ``g(X_T) N^t_T``, ``gradient`` uses ``g'(X_T) gradX_T``;
    both add ``int_t^T f(s, X_s, Y_s, Z_s) N^t_s ds`` (right-point sum) with
    ``(Y, Z)`` from the problem's reference field, and multiply by
    ``sigma(t, x)``.  The constant ``f(t, x, y(t,x), z(t,x))`` is subtracted
    inside the integral as a control variate, which is exact since
    ``E N^t_s = 0``.
    """
    if not 0 <= t < p.T:
        raise DomainError(f"need 0 <= t < T, got {t}")
    if mode not in ("weight", "gradient"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "gradient" and p.g_prime is None:
        raise CapabilityError("gradient mode needs g'")
    with_f = not p.zero_generator
    if with_f and p.reference is None:
        raise CapabilityError(f"problem {p.name!r} has a generator but no reference (y, z) field")
    dt = (p.T - t) / steps
    sqdt = math.sqrt(dt)
    times = t + dt * np.arange(1, steps + 1)
    if with_f:
        y0, z0 = reference_solution(p, t, np.array(x, float))
        c0 = float(np.asarray(p.f(t, x, y0, z0)))

    def run(chunk: int):
        a = chunk * CHUNK
        m = min(CHUNK, samples - a)
        rng = sign_generator(seed, chunk, stream=NORMAL_STREAM)
        dB = sqdt * rng.standard_normal((m, steps))
        X, G = euler_batch(p, x, t, dt, dB, gradient=True)
        N = _weights_cumulative(p, t, dt, X, G, dB)
        if mode == "weight":
            term = p.g(X[:, -1]) * N[:, -1]
        else:
            term = p.g_prime(X[:, -1]) * G[:, -1]
        gen = np.zeros(m)
        if with_f:
            ys, zs = reference_solution(p, times[None, :], X[:, 1:])
            fs = p.f(times[None, :], X[:, 1:], ys, zs) - c0
            gen = dt * np.sum(fs * N, axis=1)
        return term, gen

    nchunks = -(-samples // CHUNK)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, range(nchunks)))
    else:
        parts = [run(c) for c in range(nchunks)]
    term = np.concatenate([q[0] for q in parts])
    gen = np.concatenate([q[1] for q in parts])
    sig = float(np.asarray(p.sigma(t, x)))
    vals = (term + gen) * sig
    return WeightEstimate(
        estimate=float(vals.mean()),
        std_error=float(vals.std(ddof=1) / math.sqrt(samples)),
        samples=samples,
        mode=mode,
        steps=steps,
        terminal=float(term.mean() * sig),
        generator=float(gen.mean() * sig),
    )


# --- PDE reference ----------------------------------------------------------

def _cubic_hermite(xs0: float, dx: float, v: np.ndarray, d: np.ndarray, j, xq) -> np.ndarray:
    """Hermite cubic on a uniform grid at rows ``j`` (time level) and points ``xq``."""
    last = v.shape[1] - 2
    s = (xq - xs0) / dx
    i = np.clip(np.floor(s).astype(np.intp), 0, last)
    t = s - i
    t2, t3 = t * t, t * t * t
    return ((2 * t3 - 3 * t2 + 1) * v[j, i] + (t3 - 2 * t2 + t) * dx * d[j, i]
            + (3 * t2 - 2 * t3) * v[j, i + 1] + (t3 - t2) * dx * d[j, i + 1])


def _central_diff(u: np.ndarray, dx: float) -> np.ndarray:
    d = np.empty_like(u)
    d[..., 1:-1] = (u[..., 2:] - u[..., :-2]) / (2 * dx)
    d[..., 0] = (-3 * u[..., 0] + 4 * u[..., 1] - u[..., 2]) / (2 * dx)
    d[..., -1] = (3 * u[..., -1] - 4 * u[..., -2] + u[..., -3]) / (2 * dx)
    return d


@dataclass(eq=False)
class PdeReference:
    """Crank-Nicolson solution of the semilinear parabolic PDE on a space-time grid.

    ``u[j, i]`` approximates ``u(t_j, x_i)``; ``ux`` is the central-difference
    derivative.  Evaluation interpolates linearly in time and by cubic Hermite
    in space (slopes ``ux`` for ``u`` and ``uxx`` for ``ux``).
    """

    problem: str
    times: np.ndarray
    xs: np.ndarray
    u: np.ndarray
    ux: np.ndarray
    theta: float
    picard_iterations: np.ndarray
    richardson_error: float | None = None
    accuracy_warning: bool = False
    uxx: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.dx = float(self.xs[-1] - self.xs[0]) / (len(self.xs) - 1)
        self.dt = float(self.times[-1] - self.times[0]) / (len(self.times) - 1)
        self.uxx = _central_diff(self.ux, self.dx)
        for a in (self.u, self.ux, self.uxx):
            a.setflags(write=False)

    def _locate(self, t, x):
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        if np.any(t < self.times[0] - 1e-12) or np.any(t > self.times[-1] + 1e-12):
            raise DomainError("time outside the PDE grid")
        s = (t - self.times[0]) / self.dt
        j = np.clip(np.floor(s).astype(np.intp), 0, len(self.times) - 2)
        w = np.clip(s - j, 0.0, 1.0)
        return j, w, x

    def _eval(self, v, d, t, x):
        j, w, x = self._locate(t, x)
        x0 = self.xs[0]
        lo = _cubic_hermite(x0, self.dx, v, d, j, x)
        hi = _cubic_hermite(x0, self.dx, v, d, j + 1, x)
        out = (1 - w) * lo + w * hi
        return out

    def u_at(self, t, x) -> np.ndarray:
        return self._eval(self.u, self.ux, t, x)

    def ux_at(self, t, x) -> np.ndarray:
        return self._eval(self.ux, self.uxx, t, x)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t,x,u,u_x\n")
        for j, t in enumerate(self.times):
            for i, x in enumerate(self.xs):
                buf.write(f"{float(t)!r},{float(x)!r},{float(self.u[j, i])!r},{float(self.ux[j, i])!r}\n")
        return buf.getvalue()


def _operator(p: ProblemSpec, t: float, xs: np.ndarray, dx: float):
    """Tridiagonal coefficients of ``L u = sigma^2/2 u_xx + b u_x`` at interior points."""
    x = xs[1:-1]
    a = 0.5 * p.sigma(t, x) ** 2 / dx**2
    c = p.b(t, x) / (2 * dx)
    return a - c, -2 * a, a + c


def _system(lower, diag, upper, scale: float, nx: int) -> csc_matrix:
    """``I - scale * L`` on interior rows, linear extrapolation on the two boundary rows."""
    rows, cols, vals = [], [], []
    idx = np.arange(1, nx - 1)
    for off, coef in ((-1, lower), (0, diag), (1, upper)):
        rows.append(idx)
        cols.append(idx + off)
        vals.append((1.0 if off == 0 else 0.0) - scale * coef)
    rows += [np.array([0, 0, 0]), np.array([nx - 1] * 3)]
    cols += [np.array([0, 1, 2]), np.array([nx - 1, nx - 2, nx - 3])]
    vals += [np.array([1.0, -2.0, 1.0])] * 2
    return csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nx, nx))


def _solve_cn(p: ProblemSpec, nt: int, nx: int, x_min: float, x_max: float, theta: float = 0.5):
    xs = np.linspace(x_min, x_max, nx)
    times = np.linspace(0.0, p.T, nt + 1)
    times[-1] = p.T
    dx = (x_max - x_min) / (nx - 1)
    dt = p.T / nt
    U = np.empty((nt + 1, nx))
    U[nt] = p.g(xs)
    iters = np.zeros(nt, dtype=int)
    with_f = not p.zero_generator

    def F(t, u):
        if not with_f:
            return np.zeros(nx - 2)
        ux = (u[2:] - u[:-2]) / (2 * dx)
        x = xs[1:-1]
        return p.f(t, x, u[1:-1], p.sigma(t, x) * ux)

    op_next = _operator(p, times[nt], xs, dx)
    for j in range(nt - 1, -1, -1):
        t, t_next = times[j], times[j + 1]
        op = _operator(p, t, xs, dx)
        un = U[j + 1]
        lo, di, up = op_next
        explicit = un[1:-1] + (1 - theta) * dt * (lo * un[:-2] + di * un[1:-1] + up * un[2:])
        f_next = F(t_next, un)
        lu = splu(_system(*op, theta * dt, nx))
        guess = un.copy()
        for it in range(1, PICARD_CAP + 1):
            rhs = np.zeros(nx)
            rhs[1:-1] = explicit + dt * ((1 - theta) * f_next + theta * F(t, guess))
            new = lu.solve(rhs)
            gap = float(np.max(np.abs(new - guess)))
            guess = new
            if not with_f or gap < PICARD_TOL:
                break
        else:
            raise ConvergenceError(f"Picard iteration at time level {j} did not converge", gap)
        if not np.all(np.isfinite(guess)):
            raise NumericError(f"non-finite PDE values at time level {j}", step=j)
        U[j] = guess
        iters[j] = it
        op_next = op
    return times, xs, U, iters


def pde_reference_solver(
    p: ProblemSpec, nt: int = 512, nx: int = 2001, x_min: float = -8.0, x_max: float = 8.0,
    richardson: bool = True, accuracy_tol: float | None = None,
) -> PdeReference:
    """Crank-Nicolson solve of ``u_t + sigma^2/2 u_xx + b u_x + f(t, x, u, sigma u_x) = 0``, ``u(T) = g``.

    The nonlinear term is handled by Picard iteration at every time level
    (tolerance 1e-10, at most 50 sweeps).  With ``richardson`` the solve is
    repeated on the grid with half as many steps in each direction and
    ``max |u_fine - u_coarse| / 3`` over shared nodes is reported.
    """
    if nt < 2 or nx < 5:
        raise DomainError("PDE grid needs nt >= 2 and nx >= 5")
    if not x_max > x_min:
        raise DomainError("empty space interval")
    times, xs, U, iters = _solve_cn(p, nt, nx, x_min, x_max)
    U[-1] = p.g(xs)
    est = None
    warn = False
    if richardson and nt % 2 == 0 and nx % 2 == 1 and nx >= 9:
        _, _, Uc, _ = _solve_cn(p, nt // 2, (nx + 1) // 2, x_min, x_max)
        # coarse node c sits at fine node 2c; compare on the central half, away from the boundary rows
        nc = Uc.shape[1]
        c = np.arange(nc // 4, nc - nc // 4)
        est = float(np.max(np.abs(U[::2][:, 2 * c] - Uc[:, c])) / 3.0)
        if accuracy_tol is not None and est > accuracy_tol:
            warn = True
            warnings.warn(f"PDE Richardson estimate {est:.3g} exceeds requested {accuracy_tol:.3g}", stacklevel=2)
    dx = (x_max - x_min) / (nx - 1)
    ux = _central_diff(U, dx)
    return PdeReference(p.name, times, xs, U, ux, 0.5, iters, est, warn)
