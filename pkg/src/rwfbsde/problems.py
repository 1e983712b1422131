"""FBSDE problem instances, the built-in registry and reference solutions.

All coefficient callbacks are numpy-vectorised: they accept scalars or
arrays for every argument and broadcast like ufuncs.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np
from scipy.special import erf

from .errors import (
    CapabilityError,
    ConfigurationError,
    DomainError,
    NoReferenceError,
    RegistryError,
    ValidationError,
)

Coef = Callable[[Any, Any], np.ndarray]
Generator = Callable[[Any, Any, Any, Any], np.ndarray]
Terminal = Callable[[Any], np.ndarray]

#: Node count used by quadrature references.
QUADRATURE_NODES = 200
# standard-normal mass beyond this many deviations is below 1e-30
KINK_WIDTH = 12.0


class ReferenceKind(str, Enum):
    EXACT = "exact-analytic"
    QUADRATURE = "quadrature"
    PDE = "pde-numeric"


@dataclass(frozen=True)
class ClosedFormReference:
    """Continuous-time solution field ``y(t, x)`` and ``z(t, x) = sigma * u_x``."""

    y: Coef
    z: Coef
    kind: ReferenceKind


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    T: float
    b: Coef
    sigma: Coef
    f: Generator
    g: Terminal
    b_x: Coef | None = None
    sigma_x: Coef | None = None
    g_prime: Terminal | None = None
    g_second: Terminal | None = None
    f_x: Generator | None = None
    f_y: Generator | None = None
    f_z: Generator | None = None
    alpha: float = 1.0
    p0: int = 0
    delta: float = 1.0
    # growth/Lipschitz metadata; only probed by validate_problem
    L_f: float = 0.0
    K_f: float = 0.0
    C_g: float = 1.0
    zero_generator: bool = False
    reference: ClosedFormReference | None = None
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.T > 0:
            raise ValidationError(f"horizon T must be positive, got {self.T}")
        if not 0 < self.alpha <= 1:
            raise ValidationError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.p0 < 0:
            raise ValidationError(f"p0 must be nonnegative, got {self.p0}")
        if not self.delta > 0:
            raise ValidationError(f"ellipticity bound delta must be positive, got {self.delta}")

    @property
    def has_derivatives(self) -> bool:
        return self.b_x is not None and self.sigma_x is not None

    def psi(self, x: Any, K: float = 1.0) -> np.ndarray:
        """Polynomial growth envelope ``K (1 + |x|^(p0+1))``."""
        return K * (1.0 + np.abs(x) ** (self.p0 + 1))

    def psi_hat(self, x: Any) -> np.ndarray:
        return 1.0 + np.abs(x) ** (6 * self.p0 + 8)

    def require_derivatives(self) -> None:
        if not self.has_derivatives:
            raise CapabilityError(f"problem {self.name!r} lacks b_x/sigma_x callbacks")


def _const(c: float) -> Coef:
    def fn(t, x):
        return np.full(np.broadcast(t, x).shape, float(c))

    return fn


def _zero_gen(t, x, y, z):
    return np.zeros(np.broadcast(t, x, y, z).shape)


def _shape(*args) -> tuple[int, ...]:
    return np.broadcast(*args).shape


# --- registry -------------------------------------------------------------

def _brownian_identity(T: float = 1.0) -> ProblemSpec:
    ref = ClosedFormReference(
        y=lambda t, x: np.broadcast_to(np.asarray(x, float), _shape(t, x)).copy(),
        z=_const(1.0),
        kind=ReferenceKind.EXACT,
    )
    return ProblemSpec(
        name="brownian-identity", T=T, b=_const(0.0), sigma=_const(1.0), f=_zero_gen,
        g=lambda x: np.asarray(x, float) * 1.0, b_x=_const(0.0), sigma_x=_const(0.0),
        g_prime=lambda x: np.ones(np.shape(x)), g_second=lambda x: np.zeros(np.shape(x)),
        f_x=_zero_gen, f_y=_zero_gen, f_z=_zero_gen,
        alpha=1.0, p0=0, delta=1.0, zero_generator=True, reference=ref, params={"T": T},
    )


def _brownian_square(T: float = 1.0) -> ProblemSpec:
    ref = ClosedFormReference(
        y=lambda t, x: np.asarray(x, float) ** 2 + (T - np.asarray(t, float)),
        z=lambda t, x: np.broadcast_to(2.0 * np.asarray(x, float), _shape(t, x)).copy(),
        kind=ReferenceKind.EXACT,
    )
    return ProblemSpec(
        name="brownian-square", T=T, b=_const(0.0), sigma=_const(1.0), f=_zero_gen,
        g=lambda x: np.asarray(x, float) ** 2, b_x=_const(0.0), sigma_x=_const(0.0),
        g_prime=lambda x: 2.0 * np.asarray(x, float), g_second=lambda x: np.full(np.shape(x), 2.0),
        f_x=_zero_gen, f_y=_zero_gen, f_z=_zero_gen,
        alpha=1.0, p0=1, delta=1.0, C_g=2.0, zero_generator=True, reference=ref,
        params={"T": T},
    )


def _exp_diffusion(T: float = 1.0, mu: float = 0.05, s: float = 0.4) -> ProblemSpec:
    # X is Brownian motion with drift, so exp(X) is a geometric Brownian motion
    rate = mu + 0.5 * s * s
    ref = ClosedFormReference(
        y=lambda t, x: np.exp(np.asarray(x, float) + rate * (T - np.asarray(t, float))),
        z=lambda t, x: s * np.exp(np.asarray(x, float) + rate * (T - np.asarray(t, float))),
        kind=ReferenceKind.EXACT,
    )
    return ProblemSpec(
        name="exp-diffusion", T=T, b=_const(mu), sigma=_const(s), f=_zero_gen,
        g=lambda x: np.exp(np.asarray(x, float)), b_x=_const(0.0), sigma_x=_const(0.0),
        g_prime=lambda x: np.exp(np.asarray(x, float)), g_second=lambda x: np.exp(np.asarray(x, float)),
        f_x=_zero_gen, f_y=_zero_gen, f_z=_zero_gen,
        alpha=1.0, p0=0, delta=s, zero_generator=True, reference=ref,
        params={"T": T, "mu": mu, "s": s},
    )


def _discounted_bond(T: float = 1.0, r: float = 0.05) -> ProblemSpec:
    ref = ClosedFormReference(
        y=lambda t, x: np.broadcast_to(np.exp(-r * (T - np.asarray(t, float))), _shape(t, x)).copy(),
        z=_const(0.0),
        kind=ReferenceKind.EXACT,
    )
    return ProblemSpec(
        name="discounted-bond", T=T, b=_const(0.0), sigma=_const(1.0),
        f=lambda t, x, y, z: np.broadcast_to(-r * np.asarray(y, float), _shape(t, x, y, z)).copy(),
        g=lambda x: np.ones(np.shape(x)), b_x=_const(0.0), sigma_x=_const(0.0),
        g_prime=lambda x: np.zeros(np.shape(x)), g_second=lambda x: np.zeros(np.shape(x)),
        f_x=_zero_gen, f_y=lambda t, x, y, z: np.full(_shape(t, x, y, z), -r), f_z=_zero_gen,
        alpha=1.0, p0=0, delta=1.0, L_f=abs(r), K_f=0.0, C_g=0.0, reference=ref,
        params={"T": T, "r": r},
    )


def split_gaussian_expectation(
    fn: Callable[[np.ndarray], np.ndarray], mean, std, kink: float, nodes: int = QUADRATURE_NODES,
    width: float = KINK_WIDTH,
):
    """``E fn(mean + std * N(0,1))`` for ``fn`` smooth on either side of ``kink``.

    Gauss-Hermite converges slowly across a kink, so the standard normal line
    ``[-width, width]`` is cut at the kink and each piece gets its own
    Gauss-Legendre rule against the normal density.
    """
    mean, std = np.broadcast_arrays(np.asarray(mean, float), np.asarray(std, float))
    cut = np.clip((kink - mean) / std, -width, width)[..., None]
    node, weight = np.polynomial.legendre.leggauss(nodes // 2)
    total = 0.0
    for a, b in ((-width, cut), (cut, width)):
        half = 0.5 * (b - a)
        z = a + half * (node + 1.0)
        dens = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
        total = total + np.sum(half * weight * dens * fn(mean[..., None] + std[..., None] * z), axis=-1)
    return total


def _lipschitz_call(T: float = 1.0, K: float = 0.0, s: float = 1.0) -> ProblemSpec:
    def payoff(x):
        return np.maximum(np.asarray(x, float) - K, 0.0)

    def payoff_prime(x):
        return (np.asarray(x, float) > K).astype(float)

    def y_ref(t, x):
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        tau = T - t
        out = payoff(x)
        live = tau > 0
        if np.any(live):
            sd = s * np.sqrt(np.where(live, tau, 1.0))
            out = np.where(live, split_gaussian_expectation(payoff, x, sd, K), out)
        return out

    def z_ref(t, x):
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        tau = T - t
        out = s * payoff_prime(x)
        live = tau > 0
        if np.any(live):
            out = np.where(
                live, s * split_gaussian_expectation(payoff_prime, x, s * np.sqrt(np.where(live, tau, 1.0)), K), out,
            )
        return out

    ref = ClosedFormReference(y=y_ref, z=z_ref, kind=ReferenceKind.QUADRATURE)
    return ProblemSpec(
        name="lipschitz-call", T=T, b=_const(0.0), sigma=_const(s), f=_zero_gen, g=payoff,
        b_x=_const(0.0), sigma_x=_const(0.0), g_prime=payoff_prime, g_second=None,
        f_x=_zero_gen, f_y=_zero_gen, f_z=_zero_gen,
        alpha=1.0, p0=0, delta=s, zero_generator=True, reference=ref,
        params={"T": T, "K": K, "s": s},
    )


def bachelier_call(t, x, T: float, K: float, s: float) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form ``(y, z)`` of the Lipschitz call; used to cross-check the quadrature."""
    tau = np.asarray(T - np.asarray(t, float))
    x = np.asarray(x, float)
    sd = s * np.sqrt(tau)
    d = (x - K) / sd
    cdf = 0.5 * (1.0 + erf(d / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * d * d) / math.sqrt(2.0 * math.pi)
    return (x - K) * cdf + sd * pdf, s * cdf


class _LazyPdeField:
    """Builds the PDE reference on first use; safe to share across threads."""

    def __init__(self, problem: ProblemSpec, grid_kwargs: Mapping[str, Any]):
        self._problem = problem
        self._kwargs = dict(grid_kwargs)
        self._lock = threading.Lock()
        self._ref = None

    def get(self):
        if self._ref is None:
            with self._lock:
                if self._ref is None:
                    from .continuum import pde_reference_solver

                    self._ref = pde_reference_solver(self._problem, **self._kwargs)
        return self._ref

    def y(self, t, x):
        return self.get().u_at(t, x)

    def z(self, t, x):
        return np.asarray(self._problem.sigma(t, x)) * self.get().ux_at(t, x)


def _sine_coeffs(
    T: float = 1.0, r: float = 0.1, q: float = 0.2, c: float = 0.1, generator: float = 1.0,
    nt: int = 512, nx: int = 2001, x_min: float = -8.0, x_max: float = 8.0,
) -> ProblemSpec:
    on = float(generator)

    def f(t, x, y, z):
        return on * (-r * np.asarray(y, float) + q * np.sin(z) + c * np.sin(x)) + 0.0 * np.asarray(t, float)

    base = ProblemSpec(
        name="sine-coeffs", T=T,
        b=lambda t, x: 0.1 * np.sin(x) + 0.0 * np.asarray(t, float),
        sigma=lambda t, x: 1.0 + 0.25 * np.cos(x) + 0.0 * np.asarray(t, float),
        f=f, g=lambda x: np.sin(x),
        b_x=lambda t, x: 0.1 * np.cos(x) + 0.0 * np.asarray(t, float),
        sigma_x=lambda t, x: -0.25 * np.sin(x) + 0.0 * np.asarray(t, float),
        g_prime=lambda x: np.cos(x), g_second=lambda x: -np.sin(x),
        f_x=lambda t, x, y, z: on * c * np.cos(x) + 0.0 * (np.asarray(t, float) + y + z),
        f_y=lambda t, x, y, z: np.full(_shape(t, x, y, z), -on * r),
        f_z=lambda t, x, y, z: on * q * np.cos(z) + 0.0 * (np.asarray(t, float) + x + y),
        alpha=1.0, p0=0, delta=0.5, L_f=on * (abs(r) + abs(q) + abs(c)), K_f=on * abs(c), C_g=1.0,
        zero_generator=(on == 0.0),
        params={"T": T, "r": r, "q": q, "c": c, "generator": on},
    )
    lazy = _LazyPdeField(base, {"nt": nt, "nx": nx, "x_min": x_min, "x_max": x_max})
    return replace(base, reference=ClosedFormReference(y=lazy.y, z=lazy.z, kind=ReferenceKind.PDE))


_REGISTRY: dict[str, Callable[..., ProblemSpec]] = {
    "brownian-identity": _brownian_identity,
    "brownian-square": _brownian_square,
    "exp-diffusion": _exp_diffusion,
    "discounted-bond": _discounted_bond,
    "lipschitz-call": _lipschitz_call,
    "sine-coeffs": _sine_coeffs,
}


def registry_names() -> list[str]:
    return sorted(_REGISTRY)


def builtin_problem(name: str, params: Mapping[str, float] | None = None) -> ProblemSpec:
    """Instantiate a registered problem.

    Raises
    ------
    RegistryError
        If ``name`` is not registered; the message lists valid names.
    ValidationError
        If the parameters make the diffusion degenerate or are not accepted.
    """
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise RegistryError(f"unknown problem {name!r}; valid names: {', '.join(registry_names())}") from None
    params = dict(params or {})
    for key in ("s",):
        if key in params and not params[key] > 0:
            raise ValidationError(f"{name}: diffusion coefficient {key}={params[key]} violates ellipticity")
    try:
        return factory(**params)
    except TypeError as exc:
        raise ValidationError(f"{name}: bad parameters {sorted(params)} ({exc})") from None


def load_problem_config(path: str | Path) -> ProblemSpec:
    """Read ``{"problem": name, "params": {...}}`` from a JSON file."""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read problem config {path}: {exc}") from exc
    if not isinstance(payload, dict) or "problem" not in payload:
        raise ConfigurationError(f"{path}: expected an object with a 'problem' key")
    return builtin_problem(payload["problem"], payload.get("params") or {})


def reference_solution(p: ProblemSpec, t, x) -> tuple[np.ndarray, np.ndarray]:
    """Return the continuous solution ``(Y, Z) = (u(t, x), sigma u_x(t, x))``.

    At ``t == T`` the terminal data is returned directly, with ``z = sigma g'``
    when ``g'`` is available.
    """
    if p.reference is None:
        raise NoReferenceError(f"problem {p.name!r} has no reference solution")
    t_arr = np.asarray(t, float)
    if np.any(t_arr > p.T) or np.any(t_arr < 0):
        raise DomainError(f"time {t} outside [0, {p.T}]")
    if t_arr.ndim == 0 and float(t_arr) == p.T:
        y = np.asarray(p.g(x), float)
        if p.g_prime is not None:
            z = np.asarray(p.sigma(t_arr, x), float) * np.asarray(p.g_prime(x), float)
        else:
            z = np.asarray(p.reference.z(t_arr, x), float)
        return y, z
    return np.asarray(p.reference.y(t_arr, x), float), np.asarray(p.reference.z(t_arr, x), float)


# --- validation -----------------------------------------------------------

@dataclass
class Violation:
    check: str
    t: float
    x: float
    detail: str


@dataclass
class ValidationReport:
    problem: str
    probes: int
    violations: list[Violation] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    # spec name
    @property
    def pass_(self) -> bool:
        return self.passed

    def as_dict(self) -> dict[str, Any]:
        return {
            "problem": self.problem,
            "probes": self.probes,
            "pass": self.passed,
            "violations": [vars(v) for v in self.violations],
        }


def _central(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step: float) -> np.ndarray:
    return (fn(x + step) - fn(x - step)) / (2.0 * step)


def validate_problem(
    p: ProblemSpec, probes: int = 1000, seed: int = 0, x0: float = 0.0, half_width: float | None = None,
    fd_step: float = 1e-5, fd_rtol: float = 1e-5,
) -> ValidationReport:
    """Spot-check ellipticity, derivative callbacks and Lipschitz metadata on random probes.

    Probe points are drawn uniformly in ``[0, T] x [-L, L]`` with ``L = 6 (1 + |x0|)``
    unless ``half_width`` is given.  Failures are collected, never raised.
    """
    if probes < 1:
        raise ValidationError("probes must be >= 1")
    L = 6.0 * (1.0 + abs(x0)) if half_width is None else float(half_width)
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.0, p.T, probes)
    x = rng.uniform(-L, L, probes)
    y = rng.normal(0.0, 1.0, probes)
    z = rng.normal(0.0, 1.0, probes)
    report = ValidationReport(problem=p.name, probes=probes)

    def flag(check: str, mask: np.ndarray, detail: str, tt=t, xx=x) -> None:
        for i in np.flatnonzero(mask)[:20]:
            report.violations.append(Violation(check, float(tt[i]), float(xx[i]), detail))

    sig = np.asarray(p.sigma(t, x), float)
    flag("ellipticity", ~(sig >= p.delta), f"sigma below delta={p.delta}")

    def close(a, b):
        return np.abs(a - b) <= fd_rtol * np.maximum(1.0, np.abs(b))

    checks = [
        ("b_x", p.b_x, lambda s: p.b(t, s)),
        ("sigma_x", p.sigma_x, lambda s: p.sigma(t, s)),
    ]
    for name, deriv, base in checks:
        if deriv is not None:
            flag(f"derivative:{name}", ~close(np.asarray(deriv(t, x), float), _central(base, x, fd_step)),
                 "callback disagrees with central difference")
    if p.g_prime is not None:
        flag("derivative:g'", ~close(np.asarray(p.g_prime(x), float), _central(p.g, x, fd_step)),
             "callback disagrees with central difference")
    if p.g_second is not None and p.g_prime is not None:
        flag("derivative:g''", ~close(np.asarray(p.g_second(x), float), _central(p.g_prime, x, fd_step)),
             "callback disagrees with central difference")
    for name, deriv, base in (
        ("f_x", p.f_x, lambda s: p.f(t, s, y, z)),
        ("f_y", p.f_y, lambda s: p.f(t, x, s, z)),
        ("f_z", p.f_z, lambda s: p.f(t, x, y, s)),
    ):
        if deriv is None:
            continue
        arg = {"f_x": x, "f_y": y, "f_z": z}[name]
        flag(f"derivative:{name}", ~close(np.asarray(deriv(t, x, y, z), float), _central(base, arg, fd_step)),
             "callback disagrees with central difference")

    # empirical Lipschitz quotient of f in (x, y, z) at fixed time
    x2, y2, z2 = x + rng.normal(0, 0.5, probes), y + rng.normal(0, 0.5, probes), z + rng.normal(0, 0.5, probes)
    lhs = np.abs(np.asarray(p.f(t, x, y, z), float) - np.asarray(p.f(t, x2, y2, z2), float))
    rhs = p.L_f * (np.abs(x - x2) + np.abs(y - y2) + np.abs(z - z2))
    flag("lipschitz:f", lhs > rhs * (1 + 1e-9) + 1e-12, f"quotient exceeds L_f={p.L_f}")

    if p.reference is not None and p.reference.kind is not ReferenceKind.PDE:
        yT = np.asarray(p.reference.y(np.full(probes, p.T), x), float)
        flag("reference:terminal", ~(np.abs(yT - np.asarray(p.g(x), float)) <= 1e-10), "y(T,x) != g(x)")
        if p.reference.kind is ReferenceKind.EXACT:
            inner = t < p.T * (1 - 1e-6)
            fd = _central(lambda s: np.asarray(p.reference.y(t, s), float), x, fd_step)
            zz = np.asarray(p.reference.z(t, x), float)
            want = sig * fd
            flag("reference:z", inner & ~(np.abs(zz - want) <= 1e-6 * np.maximum(1.0, np.abs(want))),
                 "z != sigma * d/dx y")
    return report
