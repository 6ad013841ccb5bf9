"""Euler-Maruyama ensembles for the killed SDE and for the Q-process.

Paths are split into fixed blocks of ``BLOCK`` paths.  Block ``b`` owns the
Philox stream ``SeedSequence(seed).spawn(n_blocks)[b]`` and draws its initial
positions and all its normals from it, so output depends only on
``(seed, n_paths, dt)`` and not on the number of worker threads.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._backend import BACKEND, get_kernels
from .model import DiffusionModel
from .spectral import SpectralData

BLOCK = 8192
STEP_CHUNK = 256


class EmptyEnsembleError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    dt: float
    T: float
    n_paths: int
    seed: int
    record_times: tuple = ()
    left_kill_level: float = 0.0

    def __post_init__(self):
        if not (self.dt > 0 and self.dt < self.T):
            raise ValueError("need 0 < dt < T")
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        rt = tuple(float(t) for t in self.record_times) or (float(self.T),)
        if any(b <= a for a, b in zip(rt, rt[1:])):
            raise ValueError("record_times must be strictly increasing")
        if rt[0] < 0 or rt[-1] > self.T * (1 + 1e-12):
            raise ValueError("record_times must lie in [0, T]")
        object.__setattr__(self, "record_times", rt)

    def record_steps(self) -> list:
        return [int(round(t / self.dt)) for t in self.record_times]


@dataclass(frozen=True, eq=False)
class EmpiricalEnsemble:
    """Snapshot at ``time``; dead paths carry ``nan`` positions."""

    time: float
    positions: np.ndarray
    alive: np.ndarray
    n_alive: int
    overflow_events: int = 0

    @property
    def empty(self) -> bool:
        return self.n_alive == 0


@dataclass(frozen=True, eq=False)
class InitialSpec:
    """Initial law: ``point(x)``, ``uniform(a, b)``, ``grid_measure(x, w)`` or ``positions(x)``."""

    kind: str
    x: np.ndarray = field(default_factory=lambda: np.empty(0))
    w: Optional[np.ndarray] = None

    @classmethod
    def point(cls, x0: float) -> "InitialSpec":
        if not x0 > 0:
            raise ValueError("initial point must be positive")
        return cls("point", np.array([float(x0)]))

    @classmethod
    def uniform(cls, a: float, b: float) -> "InitialSpec":
        if not 0 < a < b:
            raise ValueError("need 0 < a < b")
        return cls("uniform", np.array([float(a), float(b)]))

    @classmethod
    def grid_measure(cls, points, weights) -> "InitialSpec":
        x = np.asarray(points, dtype=float)
        w = np.asarray(weights, dtype=float)
        if x.shape != w.shape or np.any(w < 0) or not w.sum() > 0 or np.any(x <= 0):
            raise ValueError("grid_measure needs positive points and nonnegative weights")
        return cls("grid_measure", x, w / w.sum())

    @classmethod
    def positions(cls, x) -> "InitialSpec":
        return cls("positions", np.asarray(x, dtype=float))

    def sample(self, rng: np.random.Generator, lo: int, n: int) -> np.ndarray:
        if self.kind == "point":
            return np.full(n, self.x[0])
        if self.kind == "uniform":
            return rng.uniform(self.x[0], self.x[1], size=n)
        if self.kind == "grid_measure":
            return self.x[rng.choice(self.x.size, size=n, p=self.w)]
        if self.kind == "positions":
            return self.x[lo:lo + n].copy()
        raise ValueError(f"unknown initial kind {self.kind!r}")


def _blocks(n_paths: int):
    return [(lo, min(BLOCK, n_paths - lo)) for lo in range(0, n_paths, BLOCK)]


def _run(step_fn, initial: InitialSpec, cfg: SimConfig, threads: int, killed: bool):
    if initial.kind == "positions" and initial.x.size != cfg.n_paths:
        raise ValueError("positions initial spec must hold n_paths entries")
    blocks = _blocks(cfg.n_paths)
    seqs = np.random.SeedSequence(cfg.seed).spawn(len(blocks))
    steps = cfg.record_steps()

    def one(b):
        lo, n = blocks[b]
        rng = np.random.Generator(np.random.Philox(seqs[b]))
        x = initial.sample(rng, lo, n).astype(float)
        alive = (x > cfg.left_kill_level).astype(np.uint8) if killed else np.ones(n, np.uint8)
        snaps, overflow, done = [], 0, 0
        for target in steps:
            while done < target:
                S = min(STEP_CHUNK, target - done)
                z = rng.standard_normal((n, S))
                overflow += step_fn(x, alive, z)
                done += S
            snaps.append((x.copy(), alive.astype(bool), overflow))
        return snaps

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(len(blocks))))
    else:
        results = [one(b) for b in range(len(blocks))]

    out = []
    for k, t in enumerate(cfg.record_times):
        pos = np.concatenate([r[k][0] for r in results])
        alive = np.concatenate([r[k][1] for r in results])
        alive &= np.isfinite(pos)
        pos = np.where(alive, pos, np.nan)
        ovf = sum(r[k][2] for r in results)
        out.append(EmpiricalEnsemble(time=float(t), positions=pos, alive=alive,
                                     n_alive=int(alive.sum()), overflow_events=int(ovf)))
    return out


def simulate_killed(model: DiffusionModel, initial: InitialSpec, cfg: SimConfig,
                    threads: int = 1, backend: Optional[str] = None) -> list:
    """Killed Euler-Maruyama ``X <- X - q(X) dt + sqrt(dt) Z``, dead once ``X <= kill level``."""
    k = get_kernels(backend)
    if model.poly_terms is not None:
        powers = np.array([p for p, _ in model.poly_terms], dtype=float)
        coefs = np.array([c for _, c in model.poly_terms], dtype=float)

        def step(x, alive, z):
            return k.killed_poly(x, alive, z, cfg.dt, powers, coefs, cfg.left_kill_level)
    else:
        def step(x, alive, z):
            return _killed_generic(model, x, alive, z, cfg.dt, cfg.left_kill_level)
    return _run(step, initial, cfg, threads, killed=True)


def _killed_generic(model, x, alive, z, dt, kill_level):
    sq = math.sqrt(dt)
    overflow = 0
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for s in range(z.shape[1]):
            idx = np.nonzero(alive)[0]
            if idx.size == 0:
                break
            xi = x[idx]
            xi = xi - np.asarray(model.q(xi), dtype=float) * dt + sq * z[idx, s]
            bad = ~np.isfinite(xi)
            overflow += int(bad.sum())
            alive[idx[bad | (xi <= kill_level)]] = 0
            x[idx] = xi
    return overflow


def simulate_qprocess(spec: SpectralData, initial: InitialSpec, cfg: SimConfig,
                      threads: int = 1, backend: Optional[str] = None) -> list:
    """Q-process ``Y <- Y - q~(Y) dt + sqrt(dt) Z`` with ``q~`` tabulated, folded at ``eps``."""
    k = get_kernels(backend)
    xs = np.ascontiguousarray(spec.grid.points, dtype=float)
    qs = np.ascontiguousarray(spec.q_tilde, dtype=float)
    eps = spec.grid.eps

    def step(x, alive, z):
        return k.reflected_table(x, z, cfg.dt, xs, qs, eps)
    return _run(step, initial, cfg, threads, killed=False)


def conditional_distribution(ens: EmpiricalEnsemble, bins: Sequence[float]) -> np.ndarray:
    """Histogram of the surviving positions normalised by ``n_alive``.

    Positions outside the bin range are clamped into the end bins.
    """
    if ens.n_alive == 0:
        raise EmptyEnsembleError(f"no surviving paths at t={ens.time}")
    edges = np.asarray(bins, dtype=float)
    pos = ens.positions[ens.alive]
    idx = np.clip(np.searchsorted(edges, pos, side="right") - 1, 0, edges.size - 2)
    return np.bincount(idx, minlength=edges.size - 1) / ens.n_alive


__all__ = ["BACKEND", "SimConfig", "EmpiricalEnsemble", "InitialSpec", "EmptyEnsembleError",
           "simulate_killed", "simulate_qprocess", "conditional_distribution"]
