import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from qsdiff.analyze import (DegenerateReweightError, InsufficientDecayError, PsiSpec,
                            QuadratureResolutionError, bin_grid_measure,
                            conditional_evolution_exact, equal_mass_bins, fit_rate,
                            make_psi_spec, psi_distance, quasi_ergodic_error,
                            quasi_ergodic_modes, reweight, survival_asymptotics,
                            theorem22_check, tv_distance)
from qsdiff.spectral import eigensystem

from conftest import Spectral, node_near


def ones(y):
    return np.ones_like(np.asarray(y, dtype=float))


def linear(y):
    return 1.0 + np.asarray(y, dtype=float)


def point_mass(grid, x):
    v = np.zeros(grid.N)
    v[int(np.argmin(np.abs(grid.points - x)))] = 1.0
    return v


def alpha_upper(sp):
    g = sp.grid
    w = np.where(g.points > 0.5 * (g.eps + g.R), sp.spec.alpha_weights, 0.0)
    return w / w.sum()


def test_tv_examples():
    assert tv_distance([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert tv_distance([1, 0, 0], [0, 0.5, 0.5]) == 1.0
    assert tv_distance([0.5, 0.5], [1, 0]) == 0.5
    with pytest.raises(ValueError):
        tv_distance([1.0], [0.5, 0.5])


def test_psi_examples(lf400):
    g = lf400.grid
    one = make_psi_spec(ones, lf400.spec)
    p = lf400.spec.alpha_weights
    q = point_mass(g, 1.0)
    assert psi_distance(p, q, one, g) == pytest.approx(2 * tv_distance(p, q), rel=1e-14)
    assert psi_distance(p, p, one, g) == 0.0
    lin = make_psi_spec(linear, lf400.spec)
    a, b = point_mass(g, 0.5), point_mass(g, 2.0)
    xa, xb = node_near(g, 0.5), node_near(g, 2.0)
    assert psi_distance(a, b, lin, g) == pytest.approx(2 + xa + xb, rel=1e-14)


@settings(max_examples=50, deadline=None)
@given(arrays(float, 30, elements=st.floats(0, 1)), arrays(float, 30, elements=st.floats(0, 1)),
       arrays(float, 30, elements=st.floats(0, 5)))
def test_psi_dominates_tv(a, b, bump):
    from types import SimpleNamespace
    if a.sum() == 0 or b.sum() == 0:
        return
    p, q = a / a.sum(), b / b.sum()
    grid = SimpleNamespace(points=np.arange(1.0, 31.0), N=30)
    spec = PsiSpec(psi=lambda y: 1.0 + bump, alpha_psi=1.0, alpha_psi2_over_eta1=1.0, c=0.5)
    assert psi_distance(p, q, spec, grid) >= 2 * tv_distance(p, q)


def test_psi_spec_validation(lf400):
    with pytest.raises(ValueError):
        make_psi_spec(lambda y: 0.5 * ones(y), lf400.spec)
    with pytest.raises(ValueError):
        PsiSpec(psi=ones, alpha_psi=1.0, alpha_psi2_over_eta1=1.0, c=1.5)


def test_reweight_examples(lf2000):
    g, s = lf2000.grid, lf2000.spec
    assert np.allclose(reweight(ones, s.alpha_weights, g), s.alpha_weights, rtol=1e-14)
    assert np.allclose(reweight(s.eta1, s.alpha_weights, g), s.beta_weights, rtol=1e-10)
    ind = ((g.points > 1) & (g.points < 2)).astype(float)
    r = reweight(ind, s.alpha_weights, g)
    assert r.sum() == pytest.approx(1.0) and np.all(r[ind == 0] == 0)
    with pytest.raises(DegenerateReweightError):
        reweight(np.zeros(g.N), s.alpha_weights, g)


def test_conditional_evolution_basics(lf2000):
    s, L, g = lf2000.spec, lf2000.gen, lf2000.grid
    mu0 = point_mass(g, 1.0)
    evo = conditional_evolution_exact(s, L, mu0, [0.0, 1.0, 20.0])
    assert np.array_equal(evo[0], mu0) and evo.survival[0] == 1.0
    assert tv_distance(evo[2], s.alpha_weights) < 1e-6
    assert 0 < evo.survival[2] < evo.survival[1] < 1
    fixed = conditional_evolution_exact(s, L, s.alpha_weights, [0.5, 2.0, 10.0])
    for law in fixed:
        assert tv_distance(law, s.alpha_weights) < 1e-8
    # P_alpha(T0 > t) = exp(-lambda1 t)
    assert np.allclose(fixed.log_survival, -s.lambda1 * fixed.times, atol=1e-10)


def test_conditional_evolution_long_time_prescaling(lf400):
    s = lf400.spec
    evo = conditional_evolution_exact(s, lf400.gen, point_mass(lf400.grid, 1.0), [3000.0])
    assert np.isfinite(evo.log_survival[0]) and evo.survival[0] == 0.0
    assert tv_distance(evo[0], s.alpha_weights) < 1e-8


def test_fit_rate_exact_data():
    t = np.linspace(0, 5, 51)
    r = fit_rate(t, 2 * np.exp(-3 * t))
    assert r.fitted_C == pytest.approx(2.0, rel=1e-10)
    assert r.fitted_gamma == pytest.approx(3.0, rel=1e-10)
    assert r.r_squared == pytest.approx(1.0, abs=1e-12)


def test_fit_rate_window_excludes_floor():
    t = np.linspace(0, 30, 301)
    d = np.maximum(2 * np.exp(-3 * t), 1e-13)
    r = fit_rate(t, d)
    assert r.fit_window[1] <= math.log(2 / 1e-10) / 3 + 0.1
    assert r.fitted_gamma == pytest.approx(3.0, rel=1e-10)


def test_fit_rate_insufficient():
    t = np.linspace(0, 1, 4)
    with pytest.raises(InsufficientDecayError):
        fit_rate(t, np.exp(-t))
    with pytest.raises(InsufficientDecayError):
        fit_rate(np.linspace(0, 1, 20), np.ones(20))


def test_fit_rate_exact_evolution_rate(lf2000):
    s = lf2000.spec
    t = np.linspace(0, 20, 201)
    evo = conditional_evolution_exact(s, lf2000.gen, point_mass(lf2000.grid, 1.0), t)
    r = fit_rate(t, [tv_distance(m, s.alpha_weights) for m in evo])
    assert abs(r.fitted_gamma / s.gap - 1) < 0.05


def test_rate_uniform_over_initial_laws(lf2000):
    s, g = lf2000.spec, lf2000.grid
    t = np.linspace(0, 20, 201)
    inits = [point_mass(g, x) for x in (0.01, 0.3, 1.0, 2.5, 4.5)]
    inits += [np.diff(g.edges) / (g.R - g.eps), alpha_upper(lf2000)]
    reps = []
    for mu0 in inits:
        evo = conditional_evolution_exact(s, lf2000.gen, mu0, t)
        reps.append(fit_rate(t, [tv_distance(m, s.alpha_weights) for m in evo]))
    gam = np.array([r.fitted_gamma for r in reps])
    assert (gam.max() - gam.min()) / gam.mean() < 0.10
    assert max(r.fitted_C for r in reps) < 10.0


def test_survival_asymptotic_limit(lf2000):
    s, g = lf2000.spec, lf2000.grid
    xs = [node_near(g, x) for x in (0.1, 1.0, 3.0)]
    tab = survival_asymptotics(s, lf2000.gen, xs, [15.0 / s.gap])
    assert np.all(tab.rel_error[:, 0] < 1e-6)


def test_survival_asymptotics_contract_at_ten_over_gap(lf2000):
    # stated contract: 1e-6 relative at t = 10 / gap
    s, g = lf2000.spec, lf2000.grid
    xs = [node_near(g, x) for x in (0.1, 1.0, 3.0)]
    tab = survival_asymptotics(s, lf2000.gen, xs, [10.0 / s.gap])
    assert np.all(tab.rel_error[:, 0] < 1e-6)


def test_survival_residual_decays_at_gap(lf2000):
    s, g = lf2000.spec, lf2000.grid
    x = node_near(g, 1.0)
    times = np.linspace(2.0, 12.0, 21)
    tab = survival_asymptotics(s, lf2000.gen, [x], times)
    resid = np.abs(tab.scaled[0] - tab.limit[0])
    rate = -np.polyfit(times, np.log(resid), 1)[0]
    assert rate == pytest.approx(s.gap, rel=0.02)
    # next-eigenvalue oracle for the leading correction
    es = eigensystem(lf2000.gen)
    i = int(np.argmin(np.abs(g.points - x)))
    eta2 = es.eta(1)
    pred = eta2[i] * np.sum(eta2 * lf2000.gen.weights) * np.exp(-s.gap * times[-1])
    assert resid[-1] == pytest.approx(abs(pred), rel=1e-3)


def test_survival_borel_set(lf2000):
    s, g = lf2000.spec, lf2000.grid
    N = g.N
    B = np.zeros(N, bool)
    B[N // 3:2 * N // 3] = True
    tab = survival_asymptotics(s, lf2000.gen, [node_near(g, 1.0)], [20.0 / s.gap], B=B)
    assert tab.limit[0] == pytest.approx(
        s.eta1[np.argmin(np.abs(g.points - node_near(g, 1.0)))] * s.m_eta1
        * s.alpha_weights[B].sum(), rel=1e-14)
    assert tab.rel_error[0, 0] < 1e-6


def test_survival_requires_nodes(lf400):
    with pytest.raises(ValueError):
        survival_asymptotics(lf400.spec, lf400.gen, [1.2345678], [1.0])


@pytest.mark.parametrize("psi", [ones, linear], ids=["one", "linear"])
def test_theorem22_bound_holds(lf2000, psi):
    s = lf2000.spec
    t = np.linspace(0, 20, 201)
    ps = make_psi_spec(psi, s, 0.5)
    rep = theorem22_check(s, lf2000.gen, ps, alpha_upper(lf2000), t)
    assert rep.t_mu is not None and not rep.gamma_halved
    assert np.all(rep.holds[t >= rep.t_mu])
    assert rep.D1 == pytest.approx(1 + (1 + ps.alpha_psi) / 0.5)
    assert rep.D2 == pytest.approx(2 + ps.alpha_psi)
    assert rep.divergence > 0


def test_theorem22_fixed_point(lf2000):
    s = lf2000.spec
    rep = theorem22_check(s, lf2000.gen, make_psi_spec(linear, s), s.alpha_weights,
                          np.linspace(0, 10, 21))
    assert rep.divergence < 1e-10 and np.all(rep.lhs < 1e-8)


def test_theorem22_support_violation_flag(lf400):
    from dataclasses import replace
    s = lf400.spec
    a = s.alpha_weights.copy()
    a[:10] = 0.0
    s2 = replace(s, alpha_weights=a)
    mu0 = point_mass(lf400.grid, lf400.grid.points[3])
    rep = theorem22_check(s2, lf400.gen, make_psi_spec(ones, s), mu0, np.linspace(0, 1, 5))
    assert rep.trivially_true and math.isinf(rep.divergence)


def test_theorem22_halving_fallback(lf2000):
    s = lf2000.spec
    t = np.linspace(0, 20, 201)
    ps = make_psi_spec(ones, s)
    mu0 = alpha_upper(lf2000)
    rep = theorem22_check(s, lf2000.gen, ps, mu0, t, gamma=3 * s.gap)
    assert rep.t_mu is None or rep.t_mu > 0
    assert not rep.gamma_halved


def _median_sign(sp):
    x = sp.grid.points
    med = x[int(np.searchsorted(np.cumsum(sp.spec.beta_weights), 0.5))]
    return lambda y: np.sign(np.asarray(y) - med)


def test_quasi_ergodic_constant(lf400):
    tab = quasi_ergodic_error(lf400.spec, lf400.gen, ones, node_near(lf400.grid, 1.0),
                              [1.0, 5.0])
    assert np.all(tab.error < 1e-9) and tab.beta_g == pytest.approx(1.0)


def test_quasi_ergodic_slope_and_constant(lf2000):
    times = np.geomspace(1.0, 50.0, 15)
    tab = quasi_ergodic_error(lf2000.spec, lf2000.gen, _median_sign(lf2000),
                              node_near(lf2000.grid, 1.0), times)
    assert -1.15 <= tab.loglog_slope() <= -0.85
    te = times * tab.error
    assert te[-1] > 0 and abs(te[-1] / te[-2] - 1) < 1e-3


def test_quasi_ergodic_matches_mode_sum(lf400):
    times = [0.7, 3.0, 20.0]
    g = _median_sign(lf400)
    x = node_near(lf400.grid, 0.8)
    tab = quasi_ergodic_error(lf400.spec, lf400.gen, g, x, times)
    modes = quasi_ergodic_modes(lf400.spec, lf400.gen, g, x, times)
    assert np.allclose(tab.estimate, modes, rtol=0, atol=1e-7)


def test_quasi_ergodic_resolution_error(lf400):
    with pytest.raises(QuadratureResolutionError):
        quasi_ergodic_error(lf400.spec, lf400.gen, _median_sign(lf400),
                            node_near(lf400.grid, 1.0), [10.0], depth=1, sub=1)


def test_equal_mass_bins(lf2000):
    g, s = lf2000.grid, lf2000.spec
    edges = equal_mass_bins(g, s.alpha_weights, 40)
    assert edges.size == 41 and edges[0] == g.eps and edges[-1] == g.R
    mass = bin_grid_measure(g, s.alpha_weights, edges)
    assert mass.sum() == pytest.approx(1.0) and np.all(np.abs(mass - 1 / 40) < 0.01)


def test_equivalence_chain_negative_control(brownian):
    from qsdiff.boundary import classify_boundary
    assert classify_boundary(brownian, "infinity").classification == "natural"
    gaps, rates = [], []
    for R in (20.0, 80.0):
        sp = Spectral(brownian, 1e-3, R, 2000, spacing="uniform")
        gaps.append(sp.spec.gap)
        t = np.linspace(0, 40 * R * R / 400, 201)
        evo = conditional_evolution_exact(sp.spec, sp.gen, point_mass(sp.grid, 1.0), t)
        rates.append(fit_rate(t, [tv_distance(m, sp.spec.alpha_weights) for m in evo])
                     .fitted_gamma)
    assert gaps[1] < 0.5 * gaps[0]
    assert rates[1] < 0.5 * rates[0]


@pytest.mark.parametrize("name", ["logistic", "cubic"])
def test_equivalence_chain_positive_models(name, logistic, cubic):
    from qsdiff.boundary import classify_boundary
    model, R = (logistic, 6.0) if name == "logistic" else (cubic, 4.0)
    assert classify_boundary(model, "infinity").classification == "entrance"
    gaps = [Spectral(model, 1e-3, R, N).spec.gap for N in (500, 1000, 2000)]
    assert min(gaps) > 0 and abs(gaps[-1] / gaps[0] - 1) < 1e-3
    sp = Spectral(model, 1e-3, R, 1000)
    t = np.linspace(0, 20, 201)
    evo = conditional_evolution_exact(sp.spec, sp.gen, point_mass(sp.grid, 1.0), t)
    r = fit_rate(t, [tv_distance(m, sp.spec.alpha_weights) for m in evo])
    assert abs(r.fitted_gamma / sp.spec.gap - 1) < 0.05
