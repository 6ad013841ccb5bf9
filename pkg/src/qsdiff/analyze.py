"""Distances, rate fits and exact conditional dynamics on the grid.

TV is reported as the half-sum ``0.5 * sum |p - q|``, in [0, 1].  The
sup-over-``|g| <= 1`` convention equals twice that, which is exactly what
``psi_distance`` returns for ``psi == 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .spectral import GeneratorMatrix, Grid, SpectralData, eigensystem, semigroup

RESOLUTION_FLOOR = 1e-12


class InsufficientDecayError(ValueError):
    pass


class DegenerateReweightError(ValueError):
    pass


class QuadratureResolutionError(RuntimeError):
    pass


def _pair(p, q):
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    return p, q


def tv_distance(p, q) -> float:
    p, q = _pair(p, q)
    return float(0.5 * np.abs(p - q).sum())


@dataclass(frozen=True)
class PsiSpec:
    psi: Callable
    alpha_psi: float
    alpha_psi2_over_eta1: float
    c: float

    def __post_init__(self):
        if not 0 < self.c < 1:
            raise ValueError("c must lie in (0, 1)")
        if not (np.isfinite(self.alpha_psi) and np.isfinite(self.alpha_psi2_over_eta1)):
            raise ValueError("psi moments must be finite")


def make_psi_spec(psi: Callable, spec: SpectralData, c: float = 0.5) -> PsiSpec:
    """Grid moments ``alpha(psi)`` and ``alpha(psi^2 / eta1)`` for a weight ``psi >= 1``."""
    v = np.asarray(psi(spec.grid.points), dtype=float) * np.ones(spec.grid.N)
    if np.any(v < 1):
        raise ValueError("psi must be >= 1 at every node")
    a = spec.alpha_weights
    return PsiSpec(psi=psi, alpha_psi=float(np.sum(v * a)),
                   alpha_psi2_over_eta1=float(np.sum(v ** 2 / spec.eta1 * a)), c=c)


def psi_distance(p, q, spec: PsiSpec, grid: Grid) -> float:
    """``sup_{|g| <= psi} |p(g) - q(g)|``, attained at ``g = psi * sign(p - q)``."""
    p, q = _pair(p, q)
    psi = np.asarray(spec.psi(grid.points), dtype=float) * np.ones(grid.N)
    return float(np.sum(psi * np.abs(p - q)))


def reweight(g: Union[Callable, np.ndarray], mu, grid: Grid) -> np.ndarray:
    """``g o mu``: the measure ``g mu / mu(g)``."""
    mu = np.asarray(mu, dtype=float)
    gv = np.asarray(g(grid.points) if callable(g) else g, dtype=float) * np.ones(grid.N)
    w = gv * mu
    if np.any(w < 0):
        raise DegenerateReweightError("g must be nonnegative on the support of mu")
    tot = w.sum()
    if not tot > 0:
        raise DegenerateReweightError("mu(g) = 0")
    return w / tot


@dataclass(frozen=True, eq=False)
class ConditionalEvolution:
    """Conditioned laws ``mu_t`` with survival ``P_mu(T0 > t) = exp(log_survival)``."""

    times: np.ndarray
    laws: list
    log_survival: np.ndarray

    @property
    def survival(self) -> np.ndarray:
        return np.exp(self.log_survival)

    def __len__(self):
        return len(self.laws)

    def __getitem__(self, k):
        return self.laws[k]

    def __iter__(self):
        return iter(self.laws)


def conditional_evolution_exact(spec: SpectralData, gen: GeneratorMatrix, mu0,
                                times: Sequence[float]) -> ConditionalEvolution:
    """``mu_t = mu0^T exp(tL) / mu0^T exp(tL) 1``, prescaled by ``exp(lambda1 t)``."""
    mu0 = np.asarray(mu0, dtype=float)
    sg = semigroup(gen)
    laws, logs = [], []
    for t in times:
        v = sg.apply_left(float(t), mu0, shift=spec.lambda1) if t > 0 else mu0.copy()
        v = np.clip(v, 0.0, None)
        z = v.sum()
        laws.append(v / z)
        logs.append(math.log(z) - spec.lambda1 * float(t))
    return ConditionalEvolution(times=np.asarray(times, dtype=float), laws=laws,
                                log_survival=np.asarray(logs))


@dataclass(frozen=True)
class ConvergenceReport:
    times: np.ndarray
    distances: np.ndarray
    fitted_C: float
    fitted_gamma: float
    fit_window: tuple
    r_squared: float


def fit_rate(times, distances, floor: float = RESOLUTION_FLOOR,
             window: Optional[tuple] = None) -> ConvergenceReport:
    """Least squares of ``log d = log C - gamma t`` inside the fit window.

    The default window opens at the first time the distance falls below half
    its initial value and closes at the last time it is above ``100 * floor``.
    """
    t = np.asarray(times, dtype=float)
    d = np.asarray(distances, dtype=float)
    if t.shape != d.shape or np.any(np.diff(t) <= 0) or np.any(d < 0):
        raise ValueError("need increasing times and nonnegative distances of equal length")
    if window is None:
        below = np.nonzero(d < 0.5 * d[0])[0]
        above = np.nonzero(d > 100 * floor)[0]
        if below.size == 0 or above.size == 0:
            raise InsufficientDecayError("distances never leave the transient/floor band")
        window = (float(t[below[0]]), float(t[above[-1]]))
    use = (t >= window[0]) & (t <= window[1]) & (d > floor)
    if use.sum() < 5:
        raise InsufficientDecayError(f"only {int(use.sum())} usable points in window {window}")
    x, y = t[use], np.log(d[use])
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss if ss > 0 else 1.0
    return ConvergenceReport(times=t, distances=d, fitted_C=float(math.exp(icpt)),
                             fitted_gamma=float(-slope), fit_window=tuple(window),
                             r_squared=float(min(max(r2, 0.0), 1.0)))


def node_indices(grid: Grid, x_nodes) -> np.ndarray:
    """Indices of grid nodes matching ``x_nodes`` (relative tolerance 1e-9)."""
    x = np.atleast_1d(np.asarray(x_nodes, dtype=float))
    idx = np.clip(np.searchsorted(grid.points, x), 0, grid.N - 1)
    lo = np.clip(idx - 1, 0, grid.N - 1)
    idx = np.where(np.abs(grid.points[lo] - x) < np.abs(grid.points[idx] - x), lo, idx)
    if np.any(np.abs(grid.points[idx] - x) > 1e-9 * np.abs(x)):
        raise ValueError("x_nodes must be grid nodes")
    return idx


@dataclass(frozen=True)
class SurvivalTable:
    x: np.ndarray
    times: np.ndarray
    scaled: np.ndarray          # (len(x), len(times)): e^{lambda1 t} P_x(X_t in B, T0 > t)
    limit: np.ndarray           # eta1(x) m(eta1) alpha(B)

    @property
    def rel_error(self) -> np.ndarray:
        return np.abs(self.scaled / self.limit[:, None] - 1.0)


def survival_asymptotics(spec: SpectralData, gen: GeneratorMatrix, x_nodes, times,
                         B: Optional[np.ndarray] = None) -> SurvivalTable:
    """``e^{lambda1 t} (exp(tL) 1_B)(x)`` against its limit ``eta1(x) m(eta1) alpha(B)``.

    ``B`` is a boolean node mask; ``None`` means the whole grid (survival).
    """
    idx = node_indices(spec.grid, x_nodes)
    ind = np.ones(spec.grid.N) if B is None else np.asarray(B, dtype=float)
    sg = semigroup(gen)
    cols = np.array([sg.apply(float(t), ind, shift=spec.lambda1)[idx] for t in times]).T
    aB = float(np.sum(spec.alpha_weights * ind))
    lim = spec.eta1[idx] * spec.m_eta1 * aB
    return SurvivalTable(x=spec.grid.points[idx], times=np.asarray(times, dtype=float),
                         scaled=cols, limit=lim)


@dataclass(frozen=True)
class Theorem22Report:
    times: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    holds: np.ndarray
    t_mu: Optional[float]
    D1: float
    D2: float
    moment_factor: float
    divergence: float
    gamma: float
    gamma_halved: bool = False
    trivially_true: bool = False


def _first_time_holding(times, holds):
    if not holds[-1]:
        return None
    bad = np.nonzero(~holds)[0]
    return float(times[0] if bad.size == 0 else times[bad[-1] + 1])


def theorem22_check(spec: SpectralData, gen: GeneratorMatrix, psi_spec: PsiSpec, mu0,
                    times: Sequence[float], gamma: Optional[float] = None) -> Theorem22Report:
    """Compare ``||mu_t - alpha||_psi`` with the explicit exponential bound.

    ``gamma`` defaults to the spectral gap; if the bound fails at the last
    sampled time it is re-evaluated with ``gamma / 2`` and flagged.
    """
    mu0 = np.asarray(mu0, dtype=float)
    times = np.asarray(times, dtype=float)
    grid = spec.grid
    evo = conditional_evolution_exact(spec, gen, mu0, times)
    lhs = np.array([psi_distance(m, spec.alpha_weights, psi_spec, grid) for m in evo])
    D1 = 1.0 + (1.0 + psi_spec.alpha_psi) / (1.0 - psi_spec.c)
    D2 = 2.0 + psi_spec.alpha_psi
    moment = math.sqrt(psi_spec.alpha_psi2_over_eta1 / spec.m_eta1)
    if np.any((mu0 > 0) & (spec.alpha_weights <= 0)):
        inf = np.full(times.size, np.inf)
        return Theorem22Report(times, lhs, inf, np.ones(times.size, bool), float(times[0]),
                               D1, D2, moment, math.inf, spec.gap, trivially_true=True)
    nu = reweight(spec.eta1, mu0, grid)
    beta = spec.beta_weights
    div = float(math.sqrt(np.sum((nu / beta - 1.0) ** 2 * beta)))
    g = spec.gap if gamma is None else float(gamma)
    pref = max(D1, D2) * moment * div
    rhs = pref * np.exp(-g * times)
    # tiny slack for round-off when both sides are ~0 (mu0 = alpha)
    holds = lhs <= rhs + 1e-12
    halved = False
    if not holds[-1] and gamma is None:
        g, halved = g / 2, True
        rhs = pref * np.exp(-g * times)
        holds = lhs <= rhs + 1e-12
    return Theorem22Report(times, lhs, rhs, holds, _first_time_holding(times, holds), D1, D2,
                           moment, div, g, gamma_halved=halved)


@dataclass(frozen=True)
class QuasiErgodicTable:
    times: np.ndarray
    estimate: np.ndarray
    beta_g: float
    error: np.ndarray

    def loglog_slope(self, t_min: Optional[float] = None) -> float:
        """Slope of ``log|error|`` against ``log t`` over ``t >= t_min`` (default: last decade)."""
        t_min = self.times[-1] / 10 if t_min is None else t_min
        use = (self.times >= t_min * (1 - 1e-12)) & (self.error > 0)
        return float(np.polyfit(np.log(self.times[use]), np.log(self.error[use]), 1)[0])


def _graded_nodes(t: float, depth: int, sub: int):
    """Composite Simpson nodes/weights on ``[0, t]``, panels halving toward both ends."""
    half = [t / 2 * 2.0 ** -k for k in range(depth)]
    brk = np.unique(np.concatenate([[0.0], half, t - np.asarray(half), [t]]))
    s_all, w_all = [], []
    for a, b in zip(brk[:-1], brk[1:]):
        s = np.linspace(a, b, 2 * sub + 1)
        w = np.ones(s.size)
        w[1:-1:2], w[2:-1:2] = 4.0, 2.0
        s_all.append(s)
        w_all.append(w * (b - a) / (6 * sub))
    return np.concatenate(s_all), np.concatenate(w_all)


def _qe_numerators(es, lam_shift, xi, gv, t, s, w):
    """Shifted Feynman-Kac numerator and survival at node ``xi`` (eigen form)."""
    V, sw = es.vectors, es.sqrt_weights
    lam = es.values - lam_shift
    a = V[xi, :] / sw[xi]                    # row factor of exp(sL) at x
    c = V.T @ sw                             # coefficients of the constant function
    # exp(sL)[x, :] = sw * (V @ (a * e^{-s lam}))
    R = (a[None, :] * np.exp(-np.outer(s, lam))) @ V.T * sw[None, :]
    U = (np.exp(-np.outer(t - s, lam)) * c[None, :]) @ V.T / sw[None, :]
    f = np.einsum("ki,ki->k", R, gv[None, :] * U)
    surv = float(np.sum(a * np.exp(-t * lam) * c))
    return float(np.dot(w, f)), surv


def quasi_ergodic_error(spec: SpectralData, gen: GeneratorMatrix, g, x, times,
                        depth: int = 24, sub: int = 4, rtol: float = 1e-4) -> QuasiErgodicTable:
    """``|E_x[(1/t) int_0^t g(X_s) ds | T0 > t] - beta(g)|`` on the grid.

    The numerator ``int_0^t (exp(sL) D_g exp((t-s)L) 1)(x) ds`` uses composite
    Simpson on panels graded toward both ends (``2 * depth * sub + 1 >= 64``
    nodes); a run with doubled nodes must agree to ``rtol``.
    """
    gv = np.asarray(g(spec.grid.points) if callable(g) else g, dtype=float) * np.ones(spec.grid.N)
    xi = int(node_indices(spec.grid, [x])[0])
    es = eigensystem(gen)
    beta_g = float(np.sum(gv * spec.beta_weights))
    est = []
    for t in times:
        t = float(t)
        if t <= 0:
            raise ValueError("times must be positive")
        s1, w1 = _graded_nodes(t, depth, sub)
        s2, w2 = _graded_nodes(t, depth, 2 * sub)
        n1, surv = _qe_numerators(es, spec.lambda1, xi, gv, t, s1, w1)
        n2, _ = _qe_numerators(es, spec.lambda1, xi, gv, t, s2, w2)
        if abs(n2 - n1) > rtol * max(abs(n2), 1e-300):
            raise QuadratureResolutionError(f"s-quadrature unresolved at t={t}: {n1} vs {n2}")
        est.append(n2 / (t * surv))
    est = np.asarray(est)
    return QuasiErgodicTable(times=np.asarray(times, dtype=float), estimate=est, beta_g=beta_g,
                             error=np.abs(est - beta_g))


def quasi_ergodic_modes(spec: SpectralData, gen: GeneratorMatrix, g, x, times) -> np.ndarray:
    """Closed-form mode double sum for the same time average (independent oracle)."""
    gv = np.asarray(g(spec.grid.points) if callable(g) else g, dtype=float) * np.ones(spec.grid.N)
    xi = int(node_indices(spec.grid, [x])[0])
    es = eigensystem(gen)
    V, sw = es.vectors, es.sqrt_weights
    lam = es.values - spec.lambda1
    a = V[xi, :] / sw[xi]
    c = V.T @ sw
    G = V.T @ (gv[:, None] * V)
    out = []
    for t in times:
        t = float(t)
        # int_0^t e^{-s la} e^{-(t-s) lb} ds = t e^{-t lb} phi(t (la - lb)), phi(z) = (1 - e^{-z})/z
        z = t * (lam[:, None] - lam[None, :])
        with np.errstate(over="ignore", invalid="ignore"):
            phi = np.where(np.abs(z) < 1e-12, 1.0, -np.expm1(-z) / np.where(z == 0, 1.0, z))
            K = t * np.exp(-t * lam)[None, :] * phi
            # for la << lb swap the roles to avoid overflow of expm1(-z)
            K2 = t * np.exp(-t * lam)[:, None] * np.where(np.abs(z) < 1e-12, 1.0,
                                                         np.expm1(z) / np.where(z == 0, 1.0, z))
        K = np.where(z >= 0, K, K2)
        num = float(a @ (G * K) @ c)
        surv = float(np.sum(a * np.exp(-t * lam) * c))
        out.append(num / (t * surv))
    return np.asarray(out)


def equal_mass_bins(grid: Grid, weights, nbins: int) -> np.ndarray:
    """Bin edges on cell boundaries splitting ``weights`` into ~equal masses."""
    w = np.asarray(weights, dtype=float)
    cum = np.concatenate([[0.0], np.cumsum(w)]) / w.sum()
    targets = np.arange(1, nbins) / nbins
    cuts = np.unique(np.searchsorted(cum, targets))
    cuts = cuts[(cuts > 0) & (cuts < grid.N)]
    return np.concatenate([[grid.edges[0]], grid.edges[cuts], [grid.edges[-1]]])


def bin_grid_measure(grid: Grid, weights, edges) -> np.ndarray:
    """Aggregate node masses into the bins given by ``edges`` (cell-boundary aligned)."""
    w = np.asarray(weights, dtype=float)
    idx = np.clip(np.searchsorted(edges, grid.points, side="right") - 1, 0, len(edges) - 2)
    return np.bincount(idx, weights=w, minlength=len(edges) - 1)
