"""Vectorised numpy versions of the compiled kernels (same signatures)."""
from __future__ import annotations

import numpy as np


def killed_poly(x, alive, z, dt, powers, coefs, kill_level):
    sq = np.sqrt(dt)
    alive_b = alive.astype(bool)
    idx = np.nonzero(alive_b)[0]
    xi = x[idx].copy()
    overflow = 0
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for s in range(z.shape[1]):
            if idx.size == 0:
                break
            d = np.zeros_like(xi)
            for p, c in zip(powers, coefs):
                d += c * xi ** p
            xi = xi - d * dt + sq * z[idx, s]
            bad = ~np.isfinite(xi)
            dead = bad | (xi <= kill_level)
            if dead.any():
                overflow += int(bad.sum())
                x[idx[dead]] = xi[dead]
                alive[idx[dead]] = 0
                idx, xi = idx[~dead], xi[~dead]
    x[idx] = xi
    return overflow


def reflected_table(x, z, dt, xs, qs, eps):
    sq = np.sqrt(dt)
    idx = np.nonzero(np.isfinite(x))[0]
    xi = x[idx].copy()
    overflow = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for s in range(z.shape[1]):
            d = np.interp(xi, xs, qs)
            xi = xi - d * dt + sq * z[idx, s]
            xi = np.where(xi < eps, 2.0 * eps - xi, xi)
        bad = ~np.isfinite(xi)
        overflow = int(bad.sum())
    x[idx] = xi
    return overflow
