"""Unit-noise diffusion models on (0, inf) killed at 0.

A model is the drift ``q`` of ``dX = dB - q(X) dt``.  Everything downstream
consumes the potential ``Q(y) = int_1^y 2 q``, the scale function
``Lambda(x) = int_1^x exp(Q)`` and the speed density ``exp(-Q)``.
"""
from __future__ import annotations

import math
import threading
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate
from scipy.special import logsumexp

QUAD_EPSABS = 1e-10
QUAD_LIMIT = 2 ** 15

DEFAULT_DOMAIN = (1e-3, 20.0)


class IntegrationError(RuntimeError):
    """Adaptive quadrature failed to reach its tolerance."""

    def __init__(self, message: str, partial: float = float("nan")):
        super().__init__(message)
        self.partial = partial


class RangeError(OverflowError):
    """An integral overflows double range even in log space."""


@dataclass(frozen=True, eq=False)
class DiffusionModel:
    """Drift ``q`` of the killed SDE plus optional closed forms.

    ``poly_terms`` holds ``(power, coeff)`` pairs when the drift is a sum of
    powers; the compiled Euler kernel uses it to avoid Python callbacks.
    """

    name: str
    drift: Callable
    drift_derivative: Optional[Callable] = None
    Q_closed_form: Optional[Callable] = None
    domain_hint: tuple = DEFAULT_DOMAIN
    poly_terms: Optional[tuple] = None
    params: dict = field(default_factory=dict)

    def q(self, x):
        return self.drift(x)

    def Q(self, x):
        """Vectorised ``Q``; scalar input gives a float."""
        if self.Q_closed_form is not None:
            return self.Q_closed_form(x)
        if np.ndim(x) == 0:
            return eval_Q(self, float(x))
        return _Q_array(self, np.asarray(x, dtype=float))


def eval_Q(model: DiffusionModel, x: float) -> float:
    """``Q(x) = int_1^x 2 q``, closed form when available else adaptive quadrature."""
    if not x > 0:
        raise ValueError(f"Q is defined on (0, inf), got x={x}")
    if model.Q_closed_form is not None:
        return float(model.Q_closed_form(x))
    if x == 1.0:
        return 0.0
    lo, hi, sign = (1.0, x, 1.0) if x > 1.0 else (x, 1.0, -1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, err, info = integrate.quad(
            lambda u: 2.0 * float(model.drift(u)), lo, hi,
            epsabs=QUAD_EPSABS, epsrel=0.0, limit=QUAD_LIMIT, full_output=1)[:3]
    if err > QUAD_EPSABS * 10 and abs(err) > 1e-13 * abs(val):
        raise IntegrationError(
            f"quadrature of 2q over [{lo}, {hi}] did not converge (err={err:.3g})",
            partial=sign * val)
    return sign * val


_GL16 = np.polynomial.legendre.leggauss(16)
_XI16, _WI16 = _GL16


def _gl(model: DiffusionModel, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    nodes, weights = _GL16
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    z = mid[:, None] + half[:, None] * nodes[None, :]
    return half * (2.0 * np.asarray(model.drift(z), dtype=float) * weights).sum(axis=1)


def _adaptive_segments(model: DiffusionModel, a: np.ndarray, b: np.ndarray,
                       tol: float = 1e-13, max_depth: int = 40) -> np.ndarray:
    # bisect every segment until 16-point GL agrees with its two halves
    out = np.zeros(a.size)
    todo = np.arange(a.size)
    whole = _gl(model, a, b)
    lo, hi = a.copy(), b.copy()
    owner = todo.copy()
    for _ in range(max_depth):
        mid = 0.5 * (lo + hi)
        left, right = _gl(model, lo, mid), _gl(model, mid, hi)
        fine = left + right
        ok = np.abs(fine - whole) <= tol * np.maximum(1.0, np.abs(fine))
        np.add.at(out, owner[ok], fine[ok])
        bad = ~ok
        if not bad.any():
            return out
        owner = np.concatenate([owner[bad], owner[bad]])
        lo, hi = np.concatenate([lo[bad], mid[bad]]), np.concatenate([mid[bad], hi[bad]])
        whole = np.concatenate([left[bad], right[bad]])
    np.add.at(out, owner, whole)
    return out


def _Q_array(model: DiffusionModel, x: np.ndarray) -> np.ndarray:
    # cumulative adaptive Gauss-Legendre between sorted abscissae, anchored at 1
    flat = x.ravel()
    if np.any(flat <= 0):
        raise ValueError("Q is defined on (0, inf)")
    pts = np.unique(np.concatenate([flat, [1.0]]))
    seg = _adaptive_segments(model, pts[:-1], pts[1:])
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    cum -= cum[np.searchsorted(pts, 1.0)]
    return cum[np.searchsorted(pts, flat)].reshape(x.shape)


class _Memo:
    """Thread-safe memo for scalar functions of one float."""

    def __init__(self, fn):
        self._fn = fn
        self._cache: dict = {}
        self._lock = threading.Lock()

    def __call__(self, x):
        if np.ndim(x) != 0:
            return np.vectorize(self.__call__, otypes=[float])(x)
        key = float(x)
        with self._lock:
            hit = self._cache.get(key)
        if hit is None:
            hit = self._fn(key)
            with self._lock:
                self._cache[key] = hit
        return hit


@dataclass(frozen=True)
class ScaleSpeed:
    Lambda: Callable
    speed_density: Callable
    log_Lambda_abs: Callable


def _delta_Q(model: DiffusionModel, a: np.ndarray, d: np.ndarray, s: np.ndarray) -> np.ndarray:
    """``Q(a + d s) - Q(a)`` without cancellation when ``|Q|`` is large.

    For large ``|Q|`` the difference is integrated in the offset ``s`` itself,
    since ``a + d s`` rounds back to ``a`` once ``s`` is below ``ulp(a)``.
    """
    z = a + d * s
    Qa = np.asarray(model.Q(a), dtype=float)
    Qz = np.asarray(model.Q(z), dtype=float)
    out = Qz - Qa
    big = np.maximum(np.abs(Qa), np.abs(Qz)) >= 1e6
    if big.any():
        ab, db, sb = a[big], d[big], s[big]
        u = 0.5 * sb[:, None] * (_XI16[None, :] + 1.0)
        vals = np.asarray(model.drift(ab[:, None] + db[:, None] * u), dtype=float)
        out[big] = db * 0.5 * sb * (2.0 * vals * _WI16).sum(axis=1)
    return out


def log_inner(model: DiffusionModel, y: np.ndarray, b: float, sigma: float) -> np.ndarray:
    """``log int_{z between b and y} exp(sigma (Q(y) - Q(z))) dz``.

    The integral is anchored at whichever end carries the larger integrand
    and swept outward on geometric panels scaled to the local slope, so a
    boundary layer of width ``1/|q|`` is resolved at any ``y``.
    """
    y = np.asarray(y, dtype=float)
    Qy = np.asarray(model.Q(y), dtype=float)
    Qb = float(model.Q(b))
    S = np.abs(y - b)
    o = np.sign(y - b)
    use_y = sigma * (Qy - Qb) <= 0.0
    anchor = np.where(use_y, y, b)
    d = np.where(use_y, -o, o)
    base = np.where(use_y, 0.0, sigma * (Qy - Qb))
    slope = np.abs(2.0 * np.asarray(model.drift(anchor), dtype=float))
    with np.errstate(divide="ignore"):
        tau = np.minimum(np.minimum(S, 0.5 * anchor), np.where(slope > 0, 1.0 / slope, np.inf))
    tau = np.maximum(tau, 1e-300)
    n_geo = np.ceil(np.log2(np.maximum(S / tau, 1.0))).astype(int)
    P = int(n_geo.max()) + 6
    j = np.arange(-4, P - 4, dtype=float)
    right = np.minimum(tau[:, None] * 2.0 ** j[None, :], S[:, None])
    right[:, -1] = S
    left = np.concatenate([np.zeros((y.size, 1)), right[:, :-1]], axis=1)
    half = 0.5 * (right - left)
    s = (0.5 * (right + left))[:, :, None] + half[:, :, None] * _XI16[None, None, :]
    A = np.broadcast_to(anchor[:, None, None], s.shape)
    D = np.broadcast_to(d[:, None, None], s.shape)
    live = np.broadcast_to((half > 0)[:, :, None], s.shape)
    phi = np.full(s.shape, -np.inf)
    phi[live] = -sigma * _delta_Q(model, A[live], D[live], s[live])
    with np.errstate(divide="ignore"):
        lw = np.log(half[:, :, None] * _WI16[None, None, :])
    lv = logsumexp((phi + lw).reshape(y.size, -1), axis=1)
    return base + lv


def scale_speed(model: DiffusionModel) -> ScaleSpeed:
    """Scale function ``Lambda`` (anchored at 1) and speed density ``exp(-Q)``.

    ``log |Lambda(x)|`` comes from geometric panels anchored where ``exp(Q)``
    peaks, so steep potentials neither overflow nor get under-resolved.
    """

    def log_abs(x: float) -> float:
        if not x > 0:
            raise ValueError(f"Lambda is defined on (0, inf), got x={x}")
        if x == 1.0:
            return -math.inf
        xa = np.array([x])
        return float(model.Q(xa)[0] + log_inner(model, xa, 1.0, -1.0)[0])

    log_memo = _Memo(log_abs)

    def Lambda(x: float) -> float:
        la = log_memo(x)
        if la > 709.0:
            raise RangeError(f"Lambda({x}) overflows double range (log={la:.4g})")
        return math.copysign(math.exp(la), x - 1.0) if la > -math.inf else 0.0

    def speed_density(x):
        return np.exp(-np.asarray(model.Q(x), dtype=float))

    return ScaleSpeed(Lambda=_Memo(Lambda), speed_density=speed_density,
                      log_Lambda_abs=log_memo)


def polynomial_drift_model(coefficients: Sequence, name: str = "polynomial",
                           domain_hint: tuple = DEFAULT_DOMAIN) -> DiffusionModel:
    """Drift ``sum coeff * x**power``; ``Q`` and ``q'`` in closed form."""
    terms = tuple((float(p), float(c)) for p, c in coefficients)
    for p, c in terms:
        if not (math.isfinite(p) and math.isfinite(c)):
            raise ValueError("powers and coefficients must be finite")

    def drift(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for p, c in terms:
            out = out + c * x ** p
        return out if out.ndim else float(out)

    def drift_derivative(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for p, c in terms:
            if p != 0.0:
                out = out + c * p * x ** (p - 1.0)
        return out if out.ndim else float(out)

    def Q(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for p, c in terms:
            if p == -1.0:
                out = out + 2.0 * c * np.log(x)
            else:
                out = out + 2.0 * c * (x ** (p + 1.0) - 1.0) / (p + 1.0)
        return out if out.ndim else float(out)

    return DiffusionModel(name=name, drift=drift, drift_derivative=drift_derivative,
                          Q_closed_form=Q, domain_hint=domain_hint, poly_terms=terms,
                          params={"terms": terms})


def _truncation_radius(model: DiffusionModel, lo: float, depth: float = 60.0) -> float:
    # smallest half-integer R with Q(R) - min Q on [lo, R] >= depth
    xs = np.arange(0.5, 200.0, 0.5)
    Qs = model.Q(xs)
    qmin = min(float(np.min(Qs)), float(model.Q(lo)))
    hit = np.nonzero(Qs - np.minimum.accumulate(np.minimum(Qs, qmin)) >= depth)[0]
    return float(xs[hit[0]]) if hit.size else DEFAULT_DOMAIN[1]


def logistic_feller_model(sigma: float, r: float, k: float) -> DiffusionModel:
    """Logistic Feller diffusion after the change of variables ``X = 2 sqrt(Z / sigma)``.

    ``dZ = sqrt(sigma Z) dB + (r Z - k Z^2) dt`` becomes the unit-noise SDE with
    drift ``q(x) = 1/(2x) - r x / 2 + k sigma x^3 / 8``.
    """
    for label, v in (("sigma", sigma), ("r", r), ("k", k)):
        if not v > 0:
            raise ValueError(f"{label} must be positive, got {v}")
    base = polynomial_drift_model([(-1, 0.5), (1, -r / 2.0), (3, k * sigma / 8.0)],
                                  name="logistic_feller")
    R = _truncation_radius(base, DEFAULT_DOMAIN[0])
    return DiffusionModel(name="logistic_feller", drift=base.drift,
                          drift_derivative=base.drift_derivative,
                          Q_closed_form=base.Q_closed_form,
                          domain_hint=(DEFAULT_DOMAIN[0], R), poly_terms=base.poly_terms,
                          params={"sigma": sigma, "r": r, "k": k})


def brownian_model() -> DiffusionModel:
    return polynomial_drift_model([], name="brownian")


def model_from_config(name: str, params: dict) -> DiffusionModel:
    """Build a model from its config name and parameter mapping."""
    if name == "logistic_feller":
        missing = {"sigma", "r", "k"} - set(params)
        if missing:
            raise ValueError(f"logistic_feller needs params {sorted(missing)}")
        return logistic_feller_model(float(params["sigma"]), float(params["r"]),
                                     float(params["k"]))
    if name == "polynomial":
        terms = params.get("terms", [])
        hint = params.get("domain_hint")
        model = polynomial_drift_model(terms)
        if hint is None:
            hint = (DEFAULT_DOMAIN[0], _truncation_radius(model, DEFAULT_DOMAIN[0]))
        return polynomial_drift_model(terms, domain_hint=tuple(hint))
    if name == "brownian":
        return brownian_model()
    raise ValueError(f"unknown model name {name!r}")
