"""Finite-volume generator, its spectrum, and the Doob h-transformed generator.

The generator ``L f = (e^Q / 2) (e^{-Q} f')'`` is discretised on cells around
the nodes: interface conductances ``a = e^{-Q(mid)} / dx``, node masses
``m_i = int_cell e^{-Q}``.  ``D_m L`` is then symmetric by construction.
The left edge carries a Dirichlet ghost (killing at 0), the right edge is
zero-flux (entrance at infinity), or Dirichlet for closed-form checks.
"""
from __future__ import annotations

import math
import warnings
import weakref
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.special import logsumexp

from .model import DiffusionModel

_XI, _WI = np.polynomial.legendre.leggauss(16)


class ConstructionError(RuntimeError):
    pass


class DegenerateSpectrumError(RuntimeError):
    pass


class PositivityError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Grid:
    points: np.ndarray
    eps: float
    R: float
    speed_weights: np.ndarray
    log_weights: np.ndarray
    edges: np.ndarray
    spacing: str
    Q_points: np.ndarray

    @property
    def N(self) -> int:
        return self.points.size


@dataclass(frozen=True, eq=False)
class GeneratorMatrix:
    """Tridiagonal generator: ``upper[i] = L[i, i+1]``, ``lower[i] = L[i+1, i]``."""

    lower: np.ndarray
    diag: np.ndarray
    upper: np.ndarray
    weights: np.ndarray
    boundary_conditions: tuple = ("dirichlet", "neumann")
    grid: Optional[Grid] = None

    @property
    def N(self) -> int:
        return self.diag.size

    def dense(self) -> np.ndarray:
        return (np.diag(self.diag) + np.diag(self.upper, 1) + np.diag(self.lower, -1))

    def matvec(self, f: np.ndarray) -> np.ndarray:
        out = self.diag * f
        out[:-1] += self.upper * f[1:]
        out[1:] += self.lower * f[:-1]
        return out

    def rmatvec(self, mu: np.ndarray) -> np.ndarray:
        """``mu^T L`` as a vector."""
        out = self.diag * mu
        out[1:] += self.upper * mu[:-1]
        out[:-1] += self.lower * mu[1:]
        return out

    def scale(self) -> float:
        return float(np.max(np.abs(self.diag)))


@dataclass(frozen=True, eq=False)
class SpectralData:
    grid: Grid
    lambda1: float
    lambda2: float
    eta1: np.ndarray
    eta2: np.ndarray
    m_eta1: float
    alpha_weights: np.ndarray
    beta_weights: np.ndarray
    q_tilde: np.ndarray
    eigenvalues: np.ndarray = field(repr=False)
    eigenvectors: np.ndarray = field(repr=False)
    model: Optional[DiffusionModel] = field(default=None, repr=False)

    @property
    def gap(self) -> float:
        return self.lambda2 - self.lambda1


def _nodes(eps: float, R: float, N: int, spacing: str) -> np.ndarray:
    if spacing == "uniform":
        raw = np.linspace(eps, R, N + 2)
    elif spacing == "log":
        if not eps > 0:
            raise ValueError("log spacing needs eps > 0")
        raw = np.geomspace(eps, R, N + 2)
    else:
        raise ValueError(f"unknown spacing {spacing!r}")
    return raw


def _log_cell_integrals(model: DiffusionModel, lo: np.ndarray, hi: np.ndarray,
                        ref: np.ndarray, Qref: np.ndarray) -> np.ndarray:
    """``log int_lo^hi e^{-Q}`` per cell, shifted by ``Q`` at the cell node."""
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    u = mid[:, None] + half[:, None] * _XI[None, :]
    expo = -(np.asarray(model.Q(u), dtype=float) - Qref[:, None])
    return -Qref + logsumexp(expo + np.log(half[:, None] * _WI[None, :]), axis=1)


def build_grid(model: DiffusionModel, eps: float, R: float, N: int,
               spacing: str = "uniform") -> Grid:
    """Interior nodes of ``(eps, R)`` with speed masses ``int_cell e^{-Q}``.

    Cells are the dual cells around each node; the first cell reaches down to
    ``eps`` and the last up to ``R`` so the masses tile ``[eps, R]``.
    """
    if not (0 <= eps < R) or N < 3:
        raise ValueError("need 0 <= eps < R and N >= 3")
    raw = _nodes(eps, R, N, spacing)
    x = raw[1:-1]
    edges = np.concatenate([[eps], 0.5 * (x[:-1] + x[1:]), [R]])
    Qx = np.asarray(model.Q(x), dtype=float)
    logw = _log_cell_integrals(model, edges[:-1], edges[1:], x, Qx)
    w = np.exp(logw)
    bad = ~(np.isfinite(w) & (w > 0))
    if bad.any():
        keep = ~bad
        idx = np.nonzero(keep)[0]
        if idx.size < 3 or idx[-1] - idx[0] + 1 != idx.size:
            raise ConstructionError("speed weights vanish inside the grid")
        warnings.warn(f"dropping {bad.sum()} node(s) where exp(-Q) under/overflows",
                      RuntimeWarning, stacklevel=2)
        lo, hi = idx[0], idx[-1] + 1
        x, Qx, logw, w = x[lo:hi], Qx[lo:hi], logw[lo:hi], w[lo:hi]
        eps = float(edges[lo]) if lo > 0 else eps
        R = float(edges[hi]) if hi < edges.size - 1 else R
        edges = edges[lo:hi + 1]
    return Grid(points=x, eps=float(eps), R=float(R), speed_weights=w, log_weights=logw,
                edges=edges, spacing=spacing, Q_points=Qx)


def discretize_generator(model: DiffusionModel, grid: Grid,
                         right: str = "neumann") -> GeneratorMatrix:
    """Three-point divergence-form stencil, Dirichlet ghost at ``eps``."""
    if right not in ("neumann", "dirichlet"):
        raise ValueError("right boundary must be 'neumann' or 'dirichlet'")
    x = grid.points
    ext = np.concatenate([[grid.eps], x, [grid.R]]) if right == "dirichlet" else \
        np.concatenate([[grid.eps], x])
    mids = 0.5 * (ext[:-1] + ext[1:])
    log_a = -np.asarray(model.Q(mids), dtype=float) - np.log(np.diff(ext))
    N = x.size
    lw = grid.log_weights
    # interface j sits between ext[j] and ext[j+1]; node i is ext[i+1]
    left_if = log_a[:N]
    right_if = log_a[1:N + 1] if right == "dirichlet" else \
        np.concatenate([log_a[1:N], [-np.inf]])
    up = 0.5 * np.exp(right_if - lw)
    dn = 0.5 * np.exp(left_if - lw)
    gen = GeneratorMatrix(lower=dn[1:].copy(), diag=-(up + dn), upper=up[:-1].copy(),
                          weights=grid.speed_weights, boundary_conditions=("dirichlet", right),
                          grid=grid)
    asym = np.abs(grid.speed_weights[:-1] * gen.upper - grid.speed_weights[1:] * gen.lower)
    size = max(np.max(np.abs(grid.speed_weights * gen.diag)), np.max(np.abs(
        grid.speed_weights[:-1] * gen.upper)))
    if np.max(asym) > 1e-12 * size:
        raise ConstructionError("D_m L is not symmetric; weight/stencil mismatch")
    return gen


@dataclass(frozen=True, eq=False)
class Eigensystem:
    """All eigenpairs of ``-L`` via its symmetrised tridiagonal form."""

    values: np.ndarray
    vectors: np.ndarray
    sqrt_weights: np.ndarray

    def eta(self, n: int) -> np.ndarray:
        return self.vectors[:, n] / self.sqrt_weights


_EIG_CACHE: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def _symmetric_bands(gen: GeneratorMatrix):
    prod = gen.lower * gen.upper
    if np.any(prod <= 0):
        raise ConstructionError("off-diagonal products must be positive to symmetrise")
    return -gen.diag, -np.sqrt(prod)


def eigensystem(gen: GeneratorMatrix) -> Eigensystem:
    """Full eigendecomposition (MRRR), cached per generator."""
    hit = _EIG_CACHE.get(gen)
    if hit is not None:
        return hit
    d, e = _symmetric_bands(gen)
    vals, vecs = eigh_tridiagonal(d, e, lapack_driver="stemr")
    sw = np.sqrt(gen.weights)
    # eigenvectors of the symmetric form satisfy v = sqrt(w) * eta up to sign
    first = vecs[:, 0]
    if first.sum() < 0:
        vecs[:, 0] = -first
    es = Eigensystem(values=vals, vectors=vecs, sqrt_weights=sw)
    _EIG_CACHE[gen] = es
    return es


def eigen_solve(gen: GeneratorMatrix, k: int) -> list:
    """The ``k`` smallest eigenpairs ``(lambda_n, eta_n)`` of ``-L``.

    The ``eta_n`` are orthonormal in ``L2(m)`` (``m`` = symmetrising weights)
    and ``eta_1 > 0``.
    """
    if not 2 <= k <= gen.N:
        raise ValueError("need 2 <= k <= N")
    es = eigensystem(gen)
    vals = es.values[:k]
    gaps = np.diff(vals)
    if np.any(gaps < 1e-12 * np.maximum(1.0, np.abs(vals[1:]))):
        raise DegenerateSpectrumError("eigenvalues closer than 1e-12: discretisation broken")
    return [(float(vals[n]), es.eta(n)) for n in range(k)]


def sign_changes(v: np.ndarray, rtol: float = 1e-10) -> int:
    s = np.sign(v[np.abs(v) > rtol * np.max(np.abs(v))])
    return int(np.count_nonzero(s[1:] != s[:-1]))


def build_spectral_data(model: DiffusionModel, grid: Grid, gen: GeneratorMatrix,
                        k: int = 4) -> SpectralData:
    pairs = eigen_solve(gen, max(2, min(k, gen.N)))
    lam = np.array([p[0] for p in pairs])
    etas = np.array([p[1] for p in pairs])
    eta1 = etas[0]
    if np.any(eta1 <= 0):
        raise PositivityError(f"eta1 has {np.count_nonzero(eta1 <= 0)} nonpositive node(s)")
    m = gen.weights
    m_eta1 = float(np.sum(eta1 * m))
    alpha = eta1 * m / m_eta1
    beta = eta1 ** 2 * m
    deta = np.gradient(eta1, grid.points, edge_order=2)
    q_tilde = np.asarray(model.q(grid.points), dtype=float) - deta / eta1
    return SpectralData(grid=grid, lambda1=float(lam[0]), lambda2=float(lam[1]),
                        eta1=eta1, eta2=etas[1], m_eta1=m_eta1, alpha_weights=alpha,
                        beta_weights=beta, q_tilde=q_tilde, eigenvalues=lam,
                        eigenvectors=etas, model=model)


def h_transform_generator(gen: GeneratorMatrix, spec: SpectralData) -> GeneratorMatrix:
    """``L~ = D_eta^{-1} (L + lambda1) D_eta``: the Q-process generator."""
    e = spec.eta1
    lower = gen.lower * e[:-1] / e[1:]
    upper = gen.upper * e[1:] / e[:-1]
    diag = gen.diag + spec.lambda1
    out = GeneratorMatrix(lower=lower, diag=diag, upper=upper, weights=spec.beta_weights,
                          boundary_conditions=("entrance", gen.boundary_conditions[1]),
                          grid=gen.grid)
    resid = np.max(np.abs(out.matvec(np.ones(out.N))))
    if resid > 1e-8 * out.scale():
        warnings.warn(f"h-transformed generator row sums off by {resid:.3g}", RuntimeWarning,
                      stacklevel=2)
    return out


class Semigroup:
    """``exp(tL)`` through the symmetric eigendecomposition.

    ``shift`` multiplies by ``exp(shift * t)``; passing ``lambda1`` keeps
    long-time survival quantities away from underflow.
    """

    def __init__(self, gen: GeneratorMatrix):
        es = eigensystem(gen)
        self.gen = gen
        self.values = es.values
        self.V = es.vectors
        self.sw = es.sqrt_weights

    def _decay(self, t: float, shift: float) -> np.ndarray:
        return np.exp(-(self.values - shift) * t)

    def apply(self, t: float, f: np.ndarray, shift: float = 0.0) -> np.ndarray:
        """``exp(tL) f`` (right action on functions)."""
        if t == 0:
            return np.array(f, dtype=float)
        c = self.V.T @ (self.sw * f)
        return (self.V @ (self._decay(t, shift) * c)) / self.sw

    def apply_left(self, t: float, mu: np.ndarray, shift: float = 0.0) -> np.ndarray:
        """``mu^T exp(tL)`` (left action on measures)."""
        if t == 0:
            return np.array(mu, dtype=float)
        c = self.V.T @ (mu / self.sw)
        return self.sw * (self.V @ (self._decay(t, shift) * c))

    def matrix(self, t: float, shift: float = 0.0) -> np.ndarray:
        if t == 0:
            return np.eye(self.values.size)
        return ((self.V * self._decay(t, shift)) @ self.V.T) / self.sw[:, None] * self.sw[None, :]


_SG_CACHE: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def semigroup(gen: GeneratorMatrix) -> Semigroup:
    hit = _SG_CACHE.get(gen)
    if hit is None:
        hit = Semigroup(gen)
        _SG_CACHE[gen] = hit
    return hit


def verify_intertwining(gen: GeneratorMatrix, spec: SpectralData, t: float, g: np.ndarray,
                        method: str = "eig") -> float:
    """``max |exp(tL~) g - e^{lambda1 t} eta^{-1} exp(tL) (eta g)|``.

    The two exponentials are computed from separate matrices: ``L`` and the
    explicit ``L~``.  ``method="expm"`` uses dense scaling-and-squaring instead
    of the symmetric eigendecompositions.
    """
    if t > 10.0 / spec.lambda1:
        raise ValueError("t must be <= 10 / lambda1")
    g = np.asarray(g, dtype=float)
    gt = h_transform_generator(gen, spec)
    e = spec.eta1
    if method == "eig":
        lhs = semigroup(gt).apply(t, g)
        rhs = semigroup(gen).apply(t, e * g, shift=spec.lambda1) / e
    elif method == "expm":
        from scipy.linalg import expm
        lhs = expm(t * gt.dense()) @ g
        rhs = math.exp(spec.lambda1 * t) * (expm(t * gen.dense()) @ (e * g)) / e
    else:
        raise ValueError(f"unknown method {method!r}")
    return float(np.max(np.abs(lhs - rhs)))


def verify_reversibility(gen_tilde: GeneratorMatrix, spec: SpectralData) -> float:
    """``max |D_beta L~ - (D_beta L~)^T|`` (only the off-diagonal bands can differ)."""
    b = spec.beta_weights
    return float(np.max(np.abs(b[:-1] * gen_tilde.upper - b[1:] * gen_tilde.lower)))


def reversibility_scale(gen_tilde: GeneratorMatrix, spec: SpectralData) -> float:
    b = spec.beta_weights
    return float(max(np.max(np.abs(b * gen_tilde.diag)),
                     np.max(np.abs(b[:-1] * gen_tilde.upper))))


def eta1_extension(spec: SpectralData):
    """``log eta1`` off the nodes: linear between nodes, power law below, flat above.

    Returns ``(log_eta, dlog_eta)`` as vectorised callables.
    """
    x = spec.grid.points
    le = np.log(spec.eta1)
    p = (le[1] - le[0]) / (math.log(x[1]) - math.log(x[0]))
    slopes = np.diff(le) / np.diff(x)

    def log_eta(u):
        u = np.asarray(u, dtype=float)
        out = np.interp(u, x, le)
        low = u < x[0]
        if np.any(low):
            out = np.where(low, le[0] + p * (np.log(np.where(low, u, x[0])) - math.log(x[0])),
                           out)
        return out

    def dlog_eta(u):
        u = np.asarray(u, dtype=float)
        idx = np.clip(np.searchsorted(x, u, side="right") - 1, 0, slopes.size - 1)
        out = slopes[idx]
        out = np.where(u < x[0], p / np.where(u < x[0], u, 1.0), out)
        return np.where(u > x[-1], 0.0, out)

    return log_eta, dlog_eta


def qprocess_model(spec: SpectralData) -> DiffusionModel:
    """Diffusion model of the h-transformed process, drift ``q - eta1'/eta1``.

    ``Q~ = Q - 2 log(eta1 / eta1(1))`` in closed form from the extension of
    ``eta1``, so the Feller integrals of the Q-process are exact in it.
    """
    base = spec.model
    if base is None:
        raise ValueError("spectral data carries no model")
    log_eta, dlog_eta = eta1_extension(spec)
    anchor = float(log_eta(1.0))

    def drift(x):
        x = np.asarray(x, dtype=float)
        out = np.asarray(base.q(x), dtype=float) - dlog_eta(x)
        return out if out.ndim else float(out)

    def Q(x):
        x = np.asarray(x, dtype=float)
        out = np.asarray(base.Q(x), dtype=float) - 2.0 * (log_eta(x) - anchor)
        return out if out.ndim else float(out)

    return DiffusionModel(name=f"{base.name}_qprocess", drift=drift, Q_closed_form=Q,
                          domain_hint=base.domain_hint)


def delta_tilde(model: DiffusionModel, spec: SpectralData,
                b_samples: Optional[Sequence[float]] = None):
    """``sup_b int_eps^b e^Q/eta1^2 * int_b^R e^{-Q} eta1^2`` and its arg-max ``b``."""
    grid = spec.grid
    log_eta, _ = eta1_extension(spec)
    if b_samples is None:
        b_samples = grid.points[:: max(1, grid.N // 200)]
    b_samples = np.asarray(sorted(b_samples), dtype=float)
    knots = np.unique(np.concatenate([[grid.eps, grid.R], grid.points, b_samples]))
    lo, hi = knots[:-1], knots[1:]
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    u = mid[:, None] + half[:, None] * _XI[None, :]
    Qu = np.asarray(model.Q(u), dtype=float)
    le = log_eta(u)
    lw = np.log(half[:, None] * _WI[None, :])
    seg_a = logsumexp(Qu - 2.0 * le + lw, axis=1)
    seg_b = logsumexp(-Qu + 2.0 * le + lw, axis=1)
    cum_a = np.concatenate([[-np.inf], np.logaddexp.accumulate(seg_a)])
    cum_b_rev = np.concatenate([[-np.inf], np.logaddexp.accumulate(seg_b[::-1])])[::-1]
    idx = np.searchsorted(knots, b_samples)
    prod = cum_a[idx] + cum_b_rev[idx]
    j = int(np.argmax(prod))
    return float(np.exp(prod[j])), float(b_samples[j])
