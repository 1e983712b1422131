"""Weighted log-log slope fits for Monte Carlo error tables."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import InsufficientDataError

Z_95 = 1.959963984540054
MAX_RELATIVE_SE = 0.25
# floor for relative standard errors so that exact (zero-SE) rows get a finite weight
MIN_RELATIVE_SE = 1e-8
# mean-square errors at or below this are rounding noise, i.e. exact zeros
ROUNDING_FLOOR = 1e-24


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    ci: tuple[float, float]
    slope_se: float
    used: int

    def as_dict(self) -> dict:
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "ci": list(self.ci),
            "slope_se": self.slope_se,
            "used": self.used,
        }


def usable_rows(rows: Iterable[tuple[float, float, float]]) -> tuple[list, list]:
    """Split rows into (usable, excluded).

    A row is usable when its estimate is above the rounding floor and its
    standard error is below 25% of the estimate.
    """
    keep, drop = [], []
    for h, err, se in rows:
        ok = err > ROUNDING_FLOOR and np.isfinite(err) and np.isfinite(se) and se < MAX_RELATIVE_SE * err
        (keep if ok else drop).append((float(h), float(err), float(se)))
    return keep, drop


def fit_slope(rows: Iterable[tuple[float, float, float]]) -> SlopeFit:
    """Weighted least squares of ``log error`` on ``log h``.

    Weights are ``1 / (se / error)**2``, the inverse variance of ``log error``
    under the delta method.  The confidence interval is the 95% normal
    interval ``slope +/- 1.96 * se(slope)``.
    """
    rows = [(float(h), float(e), float(s)) for h, e, s in rows]
    if len(rows) < 3:
        raise InsufficientDataError(f"need at least 3 rows to fit a slope, got {len(rows)}")
    h, err, se = (np.array(c) for c in zip(*rows))
    if np.any(h <= 0) or np.any(err <= 0):
        raise InsufficientDataError("slope fit needs positive h and error values")
    rel = np.maximum(se / err, MIN_RELATIVE_SE)
    w = 1.0 / rel**2
    X = np.column_stack([np.ones_like(h), np.log(h)])
    y = np.log(err)
    XtW = X.T * w
    cov = np.linalg.inv(XtW @ X)
    intercept, slope = cov @ (XtW @ y)
    slope_se = float(np.sqrt(cov[1, 1]))
    return SlopeFit(
        slope=float(slope),
        intercept=float(intercept),
        ci=(float(slope - Z_95 * slope_se), float(slope + Z_95 * slope_se)),
        slope_se=slope_se,
        used=len(rows),
    )
