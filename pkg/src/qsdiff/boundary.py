"""Feller boundary classification through the iterated integrals I(a), J(a).

Each improper integral is cut at a geometric sequence of points approaching
the endpoint (factor 2).  The increments between cutoffs are integrated in
log space, so integrands like ``exp(Q)`` with ``Q ~ y**4`` never overflow
until the partial integral itself leaves double range.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from .model import DiffusionModel, log_inner

CONVERGE_RATIO = 0.9
DIVERGE_RATIO = 0.999
TAIL_RTOL = 1e-9
MIN_CUTOFFS = 20
MAX_CUTOFFS = 64
ZERO_FLOOR = 1e-12
LOG_DBL_MAX = math.log(np.finfo(float).max)

ENDPOINTS = ("zero", "infinity")
_TABLE = {
    ("converged", "converged"): "regular",
    ("converged", "diverged"): "exit",
    ("diverged", "converged"): "entrance",
    ("diverged", "diverged"): "natural",
}

_XI, _WI = np.polynomial.legendre.leggauss(16)


class IndeterminateError(RuntimeError):
    pass


class IntegrandError(ArithmeticError):
    def __init__(self, message: str, abscissa: float):
        super().__init__(f"{message} at x={abscissa!r}")
        self.abscissa = abscissa


@dataclass(frozen=True)
class IntegralVerdict:
    status: str
    value: Optional[float]
    tail_exponent_estimate: float
    log_partial: float = math.nan
    n_cutoffs: int = 0


@dataclass(frozen=True)
class BoundaryReport:
    endpoint: str
    I: IntegralVerdict
    J: IntegralVerdict
    classification: str


def _check_direction(direction: str) -> str:
    aliases = {"zero": "toward_zero", "infinity": "toward_infinity"}
    direction = aliases.get(direction, direction)
    if direction not in ("toward_zero", "toward_infinity"):
        raise ValueError(f"unknown direction {direction!r}")
    return direction


def _log_piece(logh: Callable, u: float, v: float, rtol: float = 1e-11,
               max_panels: int = 256) -> float:
    """``log int_u^v exp(logh(y)) dy`` by composite Gauss-Legendre in ``log y``."""
    lw0, lw1 = math.log(min(u, v)), math.log(max(u, v))
    prev = None
    n = 2
    while True:
        edges = np.linspace(lw0, lw1, n + 1)
        half = 0.5 * np.diff(edges)
        w = (0.5 * (edges[:-1] + edges[1:]))[:, None] + half[:, None] * _XI[None, :]
        y = np.exp(w)
        with np.errstate(over="ignore", under="ignore", invalid="ignore", divide="ignore"):
            lh = np.asarray(logh(y.ravel()), dtype=float).reshape(y.shape)
        bad = np.isnan(lh) | (lh == math.inf)
        if bad.any():
            raise IntegrandError("integrand evaluation failed", float(y[bad][0]))
        est = float(logsumexp(lh + w + np.log(half[:, None] * _WI[None, :])))
        if prev is not None:
            if est == -math.inf and prev == -math.inf:
                return est
            if abs(est - prev) < rtol or n >= max_panels:
                return est
        prev = est
        n *= 2


def improper_integral(integrand: Optional[Callable], start: float, direction: str, *,
                      log_integrand: Optional[Callable] = None,
                      min_cutoffs: int = MIN_CUTOFFS, max_cutoffs: int = MAX_CUTOFFS,
                      floor: float = ZERO_FLOOR) -> IntegralVerdict:
    """Convergence verdict for ``int_start^endpoint f`` with ``f > 0``.

    Increments ``d_k`` over ``[c_{k-1}, c_k]`` with ``c_k = start * 2**(+-k)``
    are compared through ``r_k = d_k / d_{k-1}``.  Converged: the recent ratios
    stay below 0.9 and the geometric (Richardson) tail extrapolation moves the
    total by less than 1e-9 relative.  Diverged: recent ratios all at least
    0.999, or the partial integral overflows double range.  Otherwise
    inconclusive.

    ``log_integrand`` (log f, vectorised) is preferred when given.
    """
    direction = _check_direction(direction)
    if not start > 0:
        raise ValueError("start must be positive")
    if log_integrand is None:
        if integrand is None:
            raise ValueError("need integrand or log_integrand")

        def log_integrand(y, _f=integrand):
            vals = np.asarray(_f(y), dtype=float)
            if np.any(vals < 0):
                raise IntegrandError("integrand must be nonnegative",
                                     float(np.asarray(y)[vals < 0][0]))
            with np.errstate(divide="ignore"):
                return np.log(vals)

    factor = 2.0 if direction == "toward_infinity" else 0.5
    log_incs: list = []
    log_total = -math.inf
    lo = start
    prev_extrap = None
    ratios: list = []
    for k in range(1, max_cutoffs + 1):
        hi = start * factor ** k
        if direction == "toward_zero" and hi < floor:
            break
        li = _log_piece(log_integrand, lo, hi)
        log_incs.append(li)
        log_total = float(np.logaddexp(log_total, li))
        lo = hi
        if log_total > LOG_DBL_MAX:
            return IntegralVerdict("diverged", None, _exponent(ratios, direction),
                                   log_total, k)
        if len(log_incs) >= 2:
            a, b = log_incs[-2], log_incs[-1]
            r = 0.0 if b == -math.inf else (math.inf if a == -math.inf else math.exp(b - a))
            ratios.append(r)
        if len(ratios) < 3:
            continue
        recent = ratios[-3:]
        total = math.exp(log_total)
        extrap = None
        if max(recent) < CONVERGE_RATIO:
            r = ratios[-1]
            tail = math.exp(log_incs[-1]) * r / (1.0 - r) if log_incs[-1] > -math.inf else 0.0
            extrap = total + tail
            if k >= min_cutoffs and (tail <= TAIL_RTOL * extrap or (
                    prev_extrap is not None
                    and abs(extrap - prev_extrap) <= TAIL_RTOL * extrap)):
                return IntegralVerdict("converged", extrap, _exponent(ratios, direction),
                                       log_total, k)
        prev_extrap = extrap
        if k >= min_cutoffs and len(ratios) >= 5 and min(ratios[-5:]) >= DIVERGE_RATIO:
            return IntegralVerdict("diverged", None, _exponent(ratios, direction),
                                   log_total, k)
    return IntegralVerdict("inconclusive", None, _exponent(ratios, direction),
                           log_total, len(log_incs))


def _exponent(ratios: list, direction: str) -> float:
    # local power-law exponent s of the integrand, f ~ y**s near the endpoint
    if not ratios:
        return math.nan
    r = ratios[-1]
    if r <= 0:
        return -math.inf if direction == "toward_infinity" else math.inf
    if r == math.inf:
        return math.inf if direction == "toward_infinity" else -math.inf
    lr = math.log2(r)
    return lr - 1.0 if direction == "toward_infinity" else -lr - 1.0


def _feller(model: DiffusionModel, a: str, b: float, sigma: float) -> IntegralVerdict:
    if a not in ENDPOINTS:
        raise ValueError(f"endpoint must be one of {ENDPOINTS}")
    if not b > 0:
        raise ValueError("base point b must be positive")

    def logh(y):
        return log_inner(model, np.asarray(y, dtype=float), b, sigma)

    return improper_integral(None, b, "toward_" + a, log_integrand=logh)


def feller_I(model: DiffusionModel, a: str, b: float = 1.0) -> IntegralVerdict:
    """``I(a) = int_b^a dLambda(y) int_b^y dm(z)``."""
    return _feller(model, a, b, +1.0)


def feller_J(model: DiffusionModel, a: str, b: float = 1.0) -> IntegralVerdict:
    """``J(a) = int_b^a dm(y) int_b^y dLambda(z)``."""
    return _feller(model, a, b, -1.0)


def classify_boundary(model: DiffusionModel, endpoint: str, b: float = 1.0) -> BoundaryReport:
    I = feller_I(model, endpoint, b)
    J = feller_J(model, endpoint, b)
    cls = _TABLE.get((I.status, J.status), "unknown")
    return BoundaryReport(endpoint=endpoint, I=I, J=J, classification=cls)


def check_certain_absorption(model: DiffusionModel) -> bool:
    """True when ``Lambda(inf) = inf``: sufficient for sure absorption at an accessible 0."""
    v = improper_integral(None, 1.0, "toward_infinity",
                          log_integrand=lambda y: np.asarray(model.Q(y), dtype=float))
    if v.status == "diverged":
        return True
    if v.status == "converged":
        return False
    raise IndeterminateError(
        "scale integral toward infinity is inconclusive; raise max_cutoffs")
