"""Command line entry point: ``qsdiff <stage> --config FILE --out DIR``.

Stages run in a fixed dependency order; ``converge``, ``thm22`` and
``qergodic`` pull in ``spectrum`` automatically (recorded in the manifest).
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy

from . import __version__
from ._backend import BACKEND
from .analyze import (conditional_evolution_exact, fit_rate, make_psi_spec, psi_distance,
                      quasi_ergodic_error, theorem22_check, tv_distance, InsufficientDecayError)
from .boundary import ENDPOINTS, IndeterminateError, check_certain_absorption, classify_boundary
from .config import DEFAULT_CONFIG, ConfigError, ExperimentConfig, parse_config, parse_config_text
from .simulate import InitialSpec, SimConfig, simulate_killed
from .spectral import (build_grid, build_spectral_data, delta_tilde, discretize_generator,
                       eigensystem, h_transform_generator, reversibility_scale, sign_changes,
                       verify_intertwining, verify_reversibility)

log = logging.getLogger("qsdiff")

STAGES = ("classify", "spectrum", "simulate", "converge", "thm22", "qergodic")
NEEDS_SPECTRUM = {"converge", "thm22", "qergodic"}


class ContractError(RuntimeError):
    """A stage ran but its numerical contract was not met."""


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    if v is None:
        return ""
    return str(v)


def write_csv(path: str, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def write_kv(path: str, items) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in items:
            fh.write(f"{k} = {fmt(v)}\n")


@dataclass
class Context:
    cfg: ExperimentConfig
    out: str
    threads: int = 1
    plot: bool = False
    model: object = None
    grid: object = None
    gen: object = None
    spec: object = None
    written: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def path(self, name: str) -> str:
        p = os.path.join(self.out, name)
        self.written.append(name)
        return p


def exact_initial(text: str, spec) -> np.ndarray:
    """Initial law as node weights on the spectral grid."""
    g = spec.grid
    x = g.points
    if text == "alpha":
        return spec.alpha_weights.copy()
    if text == "beta":
        return spec.beta_weights.copy()
    if text == "alpha_upper":
        w = np.where(x > 0.5 * (g.eps + g.R), spec.alpha_weights, 0.0)
        return w / w.sum()
    kind, _, arg = text.partition(":")
    vals = [float(v) for v in arg.split(",") if v.strip()]
    if kind in ("point", "node"):
        w = np.zeros(g.N)
        w[int(np.argmin(np.abs(x - vals[0])))] = 1.0
        return w
    lo, hi = (g.eps, g.R) if not vals else vals
    w = np.diff(g.edges) * ((x >= lo) & (x <= hi))
    if not w.sum() > 0:
        raise ConfigError(f"initial law {text!r} has no mass on the grid")
    return w / w.sum()


def mc_initial(text: str, spec) -> InitialSpec:
    kind, _, arg = text.partition(":")
    if kind == "point":
        return InitialSpec.point(float(arg))
    if text == "uniform":
        return InitialSpec.uniform(spec.grid.eps, spec.grid.R)
    if kind == "uniform":
        a, b = (float(v) for v in arg.split(","))
        return InitialSpec.uniform(a, b)
    return InitialSpec.grid_measure(spec.grid.points, exact_initial(text, spec))


def stage_classify(ctx: Context) -> None:
    rows = []
    for ep in ENDPOINTS:
        rep = classify_boundary(ctx.model, ep)
        rows.append([ep, rep.I.status, _val(rep.I.value), rep.J.status, _val(rep.J.value),
                     rep.classification])
        log.info("boundary %s: %s", ep, rep.classification)
    header = ["endpoint", "I_status", "I_value", "J_status", "J_value", "class"]
    write_csv(ctx.path("boundary_report.csv"), header, rows)
    print(f"{'endpoint':<10}{'I':<11}{'J':<11}class")
    for r in rows:
        print(f"{r[0]:<10}{r[1]:<11}{r[3]:<11}{r[5]}")
    try:
        sure = check_certain_absorption(ctx.model)
    except IndeterminateError:
        sure = None
    ctx.notes.append(("certain_absorption", "indeterminate" if sure is None else sure))
    if any(r[-1] in ("unknown",) for r in rows):
        raise ContractError("boundary classification inconclusive")


def _val(v) -> float:
    return math.inf if v is None else v


def ensure_spectrum(ctx: Context) -> None:
    if ctx.spec is not None:
        return
    c = ctx.cfg
    ctx.grid = build_grid(ctx.model, c["grid.eps"], c["grid.R"], c["grid.N"], c["grid.spacing"])
    ctx.gen = discretize_generator(ctx.model, ctx.grid)
    ctx.spec = build_spectral_data(ctx.model, ctx.grid, ctx.gen)


def stage_spectrum(ctx: Context) -> None:
    ensure_spectrum(ctx)
    s, g, L = ctx.spec, ctx.grid, ctx.gen
    es = eigensystem(L)
    E = np.array([es.eta(n) for n in range(min(4, g.N))])
    ortho = float(np.max(np.abs((E * L.weights) @ E.T - np.eye(E.shape[0]))))
    Lt = h_transform_generator(L, s)
    est = eigensystem(Lt)
    k = min(10, g.N)
    shift = float(np.max(np.abs(est.values[1:k] - (es.values[1:k] - s.lambda1))
                         / est.values[1:k]))
    rev = verify_reversibility(Lt, s) / reversibility_scale(Lt, s)
    inter = verify_intertwining(L, s, 1.0, np.ones(g.N))
    dt_val, dt_b = delta_tilde(ctx.model, s)
    write_csv(ctx.path("spectrum.csv"), ["x", "m_weight", "eta1", "eta2", "alpha", "beta",
                                         "q_tilde"],
              zip(g.points, g.speed_weights, s.eta1, s.eta2, s.alpha_weights, s.beta_weights,
                  s.q_tilde))
    write_kv(ctx.path("spectrum_meta.txt"), [
        ("lambda1", s.lambda1), ("lambda2", s.lambda2), ("gap", s.gap), ("m_eta1", s.m_eta1),
        ("delta_tilde", dt_val), ("delta_tilde_argmax_b", dt_b), ("eps", g.eps), ("R", g.R),
        ("N", g.N), ("spacing", g.spacing), ("orthonormality_residual", ortho),
        ("spectrum_shift_residual", shift), ("reversibility_residual", rev),
        ("intertwining_residual_t1", inter), ("eta2_sign_changes", sign_changes(s.eta2)),
    ])
    bad = []
    if ortho >= 1e-10:
        bad.append(f"orthonormality {ortho:.3g}")
    if shift >= 1e-10:
        bad.append(f"spectrum shift {shift:.3g}")
    if rev >= 1e-10:
        bad.append(f"reversibility {rev:.3g}")
    if inter >= 1e-8:
        bad.append(f"intertwining {inter:.3g}")
    if bad:
        raise ContractError("spectral identities: " + ", ".join(bad))


def stage_simulate(ctx: Context) -> None:
    c = ctx.cfg
    init_text = c["sim.initial"]
    if not (init_text.startswith("point:") or init_text.startswith("uniform:")):
        ensure_spectrum(ctx)
    init = mc_initial(init_text, ctx.spec)
    sc = SimConfig(dt=c["sim.dt"], T=c["sim.T"], n_paths=c["sim.paths"], seed=c["sim.seed"],
                   record_times=c["sim.record_times"], left_kill_level=c["sim.left_kill_level"])
    ens = simulate_killed(ctx.model, init, sc, threads=ctx.threads)
    rows = []
    for e in ens:
        write_csv(ctx.path(f"ensemble_t{fmt(e.time)}.csv"), ["path_id", "alive", "position"],
                  zip(range(e.positions.size), e.alive, e.positions))
        rows.append([e.time, e.n_alive, e.n_alive / sc.n_paths])
        log.info("t=%g: %d of %d alive", e.time, e.n_alive, sc.n_paths)
    write_csv(ctx.path("survival.csv"), ["t", "n_alive", "fraction"], rows)
    if ens[-1].overflow_events:
        raise ContractError(f"{ens[-1].overflow_events} drift overflow events")


def _psi(name: str):
    if name == "linear":
        return lambda y: 1.0 + np.asarray(y, dtype=float)
    return lambda y: np.ones_like(np.asarray(y, dtype=float))


def stage_converge(ctx: Context) -> None:
    c, s = ctx.cfg, ctx.spec
    times = np.linspace(0.0, c["analysis.t_max"], c["analysis.n_times"])
    mu0 = exact_initial(c["analysis.initial"], s)
    evo = conditional_evolution_exact(s, ctx.gen, mu0, times)
    ps = make_psi_spec(_psi(c["analysis.psi"]), s, c["analysis.c"])
    tv = [tv_distance(m, s.alpha_weights) for m in evo]
    psi = [psi_distance(m, s.alpha_weights, ps, ctx.grid) for m in evo]
    write_csv(ctx.path("tv_decay.csv"), ["t", "tv", "psi", "survival"],
              zip(times, tv, psi, evo.survival))
    win = c["analysis.fit_window"] or None
    try:
        rep = fit_rate(times, tv, window=win)
    except InsufficientDecayError as exc:
        raise ContractError(f"rate fit: {exc}") from None
    rel = abs(rep.fitted_gamma / s.gap - 1.0)
    write_csv(ctx.path("rate_fit.csv"), ["C", "gamma", "r2", "window_lo", "window_hi", "gap",
                                         "gamma_rel_error"],
              [[rep.fitted_C, rep.fitted_gamma, rep.r_squared, rep.fit_window[0],
                rep.fit_window[1], s.gap, rel]])
    if rel >= 0.05:
        raise ContractError(f"fitted rate {rep.fitted_gamma:.6g} is {rel:.1%} off the gap")


def stage_thm22(ctx: Context) -> None:
    c, s = ctx.cfg, ctx.spec
    times = np.linspace(0.0, c["analysis.t_max"], c["analysis.n_times"])
    mu0 = exact_initial(c["analysis.thm22_initial"], s)
    ps = make_psi_spec(_psi(c["analysis.psi"]), s, c["analysis.c"])
    rep = theorem22_check(s, ctx.gen, ps, mu0, times)
    write_csv(ctx.path("thm22.csv"), ["t", "lhs", "rhs", "holds"],
              zip(rep.times, rep.lhs, rep.rhs, rep.holds))
    ctx.notes += [("thm22.t_mu", rep.t_mu), ("thm22.gamma", rep.gamma),
                  ("thm22.gamma_halved", rep.gamma_halved), ("thm22.D1", rep.D1),
                  ("thm22.D2", rep.D2), ("thm22.divergence", rep.divergence)]
    if rep.t_mu is None:
        raise ContractError("bound never holds through the last sampled time")


def stage_qergodic(ctx: Context) -> None:
    c, s = ctx.cfg, ctx.spec
    x = ctx.grid.points
    med = x[int(np.searchsorted(np.cumsum(s.beta_weights), 0.5))]
    node = x[int(np.argmin(np.abs(x - c["analysis.qe_x"])))]
    times = np.geomspace(c["analysis.qe_t_min"], c["analysis.qe_t_max"], c["analysis.qe_points"])
    tab = quasi_ergodic_error(s, ctx.gen, lambda y: np.sign(y - med), node, times)
    write_csv(ctx.path("qe_error.csv"), ["t", "estimate", "beta_g", "error"],
              zip(tab.times, tab.estimate, np.full(times.size, tab.beta_g), tab.error))
    t_min = max(times[0], times[-1] / 10)
    slope = tab.loglog_slope(t_min)
    ctx.notes += [("qergodic.slope", slope), ("qergodic.t_times_error_last",
                                              float(times[-1] * tab.error[-1]))]
    if not -1.15 <= slope <= -0.85:
        raise ContractError(f"quasi-ergodic log-log slope {slope:.4g} outside [-1.15, -0.85]")


_RUNNERS = {"classify": stage_classify, "spectrum": stage_spectrum, "simulate": stage_simulate,
            "converge": stage_converge, "thm22": stage_thm22, "qergodic": stage_qergodic}

_PLOTS = {
    "tv_decay.csv": ("t", ["tv", "psi"], "semilogy"),
    "survival.csv": ("t", ["fraction"], "semilogy"),
    "thm22.csv": ("t", ["lhs", "rhs"], "semilogy"),
    "qe_error.csv": ("t", ["error"], "loglog"),
    "spectrum.csv": ("x", ["alpha", "beta"], "plot"),
}


def _plot(ctx: Context) -> None:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; skipping --plot")
        return
    matplotlib.rcParams["svg.hashsalt"] = "qsdiff"
    for name in list(ctx.written):
        if name not in _PLOTS:
            continue
        xcol, ycols, kind = _PLOTS[name]
        with open(os.path.join(ctx.out, name), encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        xs = np.array([float(r[xcol]) for r in rows])
        fig, ax = plt.subplots(figsize=(6, 4))
        for col in ycols:
            ys = np.array([float(r[col]) for r in rows])
            getattr(ax, kind)(xs, ys, label=col)
        ax.set_xlabel(xcol)
        ax.legend()
        fig.tight_layout()
        svg = name.replace(".csv", ".svg")
        fig.savefig(ctx.path(svg), format="svg", metadata={"Date": None})
        plt.close(fig)


def run_pipeline(cfg: ExperimentConfig, stages, out: Optional[str] = None, threads: int = 1,
                 plot: Optional[bool] = None) -> int:
    """Run ``stages`` in dependency order; 0 iff every stage met its contract."""
    requested = [s for s in STAGES if s in set(stages)]
    unknown = set(stages) - set(STAGES)
    if unknown:
        raise ValueError(f"unknown stage(s): {sorted(unknown)}")
    auto = []
    if NEEDS_SPECTRUM & set(requested) and "spectrum" not in requested:
        auto.append("spectrum")
        log.info("auto-inserting spectrum stage")
    order = [s for s in STAGES if s in set(requested) | set(auto)]
    out = out or cfg["output.dir"]
    os.makedirs(out, exist_ok=True)
    ctx = Context(cfg=cfg, out=out, threads=threads,
                  plot=cfg["output.plot"] if plot is None else plot, model=cfg.model())
    timings, status, failed = [], {}, []
    for st in order:
        t0 = time.perf_counter()
        try:
            _RUNNERS[st](ctx)
            status[st] = "ok"
        except ContractError as exc:
            status[st] = f"contract failed: {exc}"
            failed.append(st)
            log.error("%s: contract failed: %s", st, exc)
        except Exception as exc:  # noqa: BLE001 - reported in the manifest and exit status
            status[st] = f"error: {type(exc).__name__}: {exc}"
            failed.append(st)
            log.error("%s: %s: %s", st, type(exc).__name__, exc)
            timings.append((st, time.perf_counter() - t0))
            break
        timings.append((st, time.perf_counter() - t0))
    if ctx.plot:
        _plot(ctx)
    items = [("config_sha256", cfg.digest()), ("seed", cfg["sim.seed"]),
             ("qsdiff", __version__), ("backend", BACKEND), ("python", platform.python_version()),
             ("numpy", np.__version__), ("scipy", scipy.__version__),
             ("stages_requested", ",".join(requested)), ("stages_run", ",".join(order)),
             ("auto_inserted", ",".join(auto)),
             ("timestamp", time.strftime("%Y-%m-%dT%H:%M:%S"))]
    for st, sec in timings:
        items += [(f"stage.{st}.seconds", f"{sec:.3f}"), (f"stage.{st}.status", status[st])]
    items += ctx.notes
    items.append(("files", ",".join(ctx.written)))
    write_kv(os.path.join(out, "manifest.txt"), items)
    with open(os.path.join(out, "manifest.txt"), "a", encoding="utf-8") as fh:
        fh.write("\n# resolved configuration\n" + cfg.dump())
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--out", help="output directory (overrides output.dir)")
    common.add_argument("--plot", action="store_true", help="write SVG charts of the CSVs")
    common.add_argument("--threads", type=int, default=1, help="worker threads for simulation")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="qsdiff", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGES + ("all",):
        sub.add_parser(name, parents=[common], help=f"run the {name} stage" if name != "all"
                       else "run every stage")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config) if args.config else parse_config_text(DEFAULT_CONFIG)
    except (ConfigError, OSError) as exc:
        print(f"qsdiff: config error: {exc}", file=sys.stderr)
        return 2
    if args.threads < 1:
        print("qsdiff: --threads must be >= 1", file=sys.stderr)
        return 2
    stages = STAGES if args.command == "all" else (args.command,)
    code = run_pipeline(cfg, stages, out=args.out, threads=args.threads,
                        plot=True if args.plot else None)
    if code:
        print("qsdiff: one or more stage contracts failed; see manifest.txt", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
