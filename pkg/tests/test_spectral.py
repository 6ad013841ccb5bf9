import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from qsdiff.model import brownian_model, logistic_feller_model, polynomial_drift_model
from qsdiff.spectral import (ConstructionError, DegenerateSpectrumError, GeneratorMatrix,
                             build_grid, build_spectral_data, delta_tilde, discretize_generator,
                             eigen_solve, eigensystem, h_transform_generator,
                             reversibility_scale, sign_changes, verify_intertwining,
                             verify_reversibility)

from conftest import Spectral


def speed_mass(model, a, b):
    return quad(lambda y: math.exp(-model.Q(y)), a, b, epsabs=0, epsrel=1e-13, limit=500)[0]


def test_flat_model_weights_tile_the_interval():
    g = build_grid(brownian_model(), 0.0, 1.0, 3, "uniform")
    assert np.allclose(g.points, [0.25, 0.5, 0.75])
    # dual cells of width 1/4 inside, end cells stretched to the truncation points
    assert np.allclose(g.speed_weights, [0.375, 0.25, 0.375], rtol=1e-14)
    assert g.speed_weights.sum() == pytest.approx(1.0, rel=1e-14)


@pytest.mark.parametrize("case", [("logistic", 6.0, 2000), ("cubic", 4.0, 1500)])
@pytest.mark.parametrize("spacing", ["log", "uniform"])
def test_speed_mass_matches_quadrature(case, spacing, logistic, cubic):
    name, R, N = case
    model = logistic if name == "logistic" else cubic
    g = build_grid(model, 1e-3, R, N, spacing)
    assert g.N == N and np.all(np.diff(g.points) > 0) and np.all(g.speed_weights > 0)
    assert g.speed_weights.sum() == pytest.approx(speed_mass(model, 1e-3, R), rel=1e-6)


def test_build_grid_preconditions(logistic):
    with pytest.raises(ValueError):
        build_grid(logistic, 1.0, 0.5, 10)
    with pytest.raises(ValueError):
        build_grid(logistic, 1e-3, 6.0, 2)
    with pytest.raises(ValueError):
        build_grid(logistic, 0.0, 6.0, 10, "log")


def test_underflowing_nodes_are_dropped(cubic):
    with pytest.warns(RuntimeWarning, match="dropping"):
        g = build_grid(cubic, 1e-3, 40.0, 400, "uniform")
    assert g.N < 400 and np.all(g.speed_weights > 0) and g.R < 40.0


def test_flat_stencil_is_laplacian():
    g = build_grid(brownian_model(), 1e-3, 1.0, 50, "uniform")
    L = discretize_generator(brownian_model(), g)
    h = g.points[1] - g.points[0]
    D = L.dense()
    for i in range(5, 10):
        assert np.allclose(D[i, i - 1:i + 2], np.array([1, -2, 1]) / (2 * h * h), rtol=1e-12)


def test_killing_at_left_edge(lf400):
    L = lf400.gen
    assert L.matvec(np.ones(L.N))[0] < 0
    assert np.all(L.lower >= 0) and np.all(L.upper >= 0)


def test_generator_symmetry(lf2000):
    L, m = lf2000.gen, lf2000.gen.weights
    DL = m[:, None] * L.dense()
    assert np.max(np.abs(DL - DL.T)) < 1e-12 * np.max(np.abs(DL))


def test_dense_matvec_rmatvec_agree(lf400):
    L = lf400.gen
    rng = np.random.default_rng(0)
    f = rng.normal(size=L.N)
    assert np.allclose(L.matvec(f), L.dense() @ f, rtol=1e-12, atol=0)
    assert np.allclose(L.rmatvec(f), f @ L.dense(), rtol=1e-12, atol=1e-12 * L.scale())


def test_dirichlet_interval_eigenvalues():
    m = brownian_model()
    g = build_grid(m, 0.0, math.pi, 2000, "uniform")
    pairs = eigen_solve(discretize_generator(m, g, right="dirichlet"), 3)
    for n, (lam, _) in enumerate(pairs, start=1):
        assert lam == pytest.approx(n * n / 2, rel=1e-5)


def test_orthonormality(lf2000):
    pairs = eigen_solve(lf2000.gen, 4)
    E = np.array([e for _, e in pairs])
    G = (E * lf2000.gen.weights) @ E.T
    assert np.max(np.abs(G - np.eye(4))) < 1e-10
    lams = [lam for lam, _ in pairs]
    assert all(b > a for a, b in zip(lams, lams[1:])) and lams[0] > 0


def test_eigen_solve_bounds(lf400):
    with pytest.raises(ValueError):
        eigen_solve(lf400.gen, 1)
    with pytest.raises(ValueError):
        eigen_solve(lf400.gen, lf400.gen.N + 1)


def test_degenerate_spectrum_detected():
    # two identical, almost decoupled blocks have (numerically) repeated eigenvalues
    n = 20
    d = -np.full(2 * n, 2.0)
    off = np.ones(2 * n - 1)
    off[n - 1] = 1e-150
    gen = GeneratorMatrix(lower=off.copy(), diag=d, upper=off.copy(), weights=np.ones(2 * n))
    with pytest.raises(DegenerateSpectrumError):
        eigen_solve(gen, 4)


def test_nonsymmetrisable_rejected():
    gen = GeneratorMatrix(lower=np.array([0.0, 1.0]), diag=-np.ones(3),
                          upper=np.array([1.0, 1.0]), weights=np.ones(3))
    with pytest.raises(ConstructionError):
        eigen_solve(gen, 2)


def test_self_convergence_three_digits(logistic):
    a = Spectral(logistic, 1e-3, 6.0, 1000).spec
    b = Spectral(logistic, 1e-3, 6.0, 2000).spec
    assert abs(a.lambda1 / b.lambda1 - 1) < 5e-4
    assert abs(a.lambda2 / b.lambda2 - 1) < 5e-4


def test_spectral_data_invariants(lf2000):
    s = lf2000.spec
    m = lf2000.gen.weights
    assert 0 < s.lambda1 < s.lambda2
    assert np.all(s.eta1 > 0)
    assert np.sum(s.eta1 ** 2 * m) == pytest.approx(1.0, abs=1e-12)
    assert s.alpha_weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert s.beta_weights.sum() == pytest.approx(1.0, abs=1e-10)
    assert np.allclose(s.alpha_weights, s.eta1 * m / s.m_eta1, rtol=1e-14)
    assert s.m_eta1 == pytest.approx(np.sum(s.eta1 * m), rel=1e-14)
    assert sign_changes(s.eta2) == 1


def test_eta1_increasing_and_bounded(lf2000):
    eta = lf2000.spec.eta1
    assert np.all(np.diff(eta) >= 0)
    assert np.argmax(eta) >= 0.95 * eta.size and np.isfinite(eta.max())


def test_q_tilde_centered_differences(lf400):
    s, x = lf400.spec, lf400.grid.points
    i = 200
    d = ((s.eta1[i + 1] - s.eta1[i]) / (x[i + 1] - x[i]) * (x[i] - x[i - 1])
         + (s.eta1[i] - s.eta1[i - 1]) / (x[i] - x[i - 1]) * (x[i + 1] - x[i])) / (
        x[i + 1] - x[i - 1])
    assert s.q_tilde[i] == pytest.approx(lf400.model.q(x[i]) - d / s.eta1[i], rel=1e-10)


def test_h_transform_spectrum(lf2000):
    s = lf2000.spec
    Lt = h_transform_generator(lf2000.gen, s)
    ev = eigensystem(Lt).values
    base = eigensystem(lf2000.gen).values
    assert abs(ev[0]) < 1e-10
    assert ev[1] == pytest.approx(s.lambda2 - s.lambda1, rel=1e-10)
    assert np.max(np.abs(ev[1:50] - (base[1:50] - s.lambda1)) / ev[1:50]) < 1e-10
    assert np.max(np.abs(Lt.matvec(np.ones(Lt.N)))) < 1e-8 * Lt.scale()


@pytest.mark.parametrize("t", [0.5, 1.0, 2.0])
def test_intertwining(lf2000, t):
    s = lf2000.spec
    assert verify_intertwining(lf2000.gen, s, t, np.ones(lf2000.grid.N)) < 1e-8
    g = s.eta2 / s.eta1
    assert verify_intertwining(lf2000.gen, s, t, g) < 1e-8 * np.max(np.abs(g))


def test_intertwining_eigen_relation(lf2000):
    from qsdiff.spectral import semigroup
    s = lf2000.spec
    g = s.eta2 / s.eta1
    lhs = semigroup(h_transform_generator(lf2000.gen, s)).apply(1.0, g)
    assert np.max(np.abs(lhs - math.exp(-s.gap) * g)) < 1e-8 * np.max(np.abs(g))


def test_intertwining_t_zero(lf400):
    g = np.linspace(-1, 1, lf400.grid.N)
    assert verify_intertwining(lf400.gen, lf400.spec, 0.0, g) < 1e-12


def test_intertwining_expm_small_grid(logistic):
    sp = Spectral(logistic, 1e-3, 6.0, 300, spacing="uniform")
    g = np.ones(sp.grid.N)
    r_eig = verify_intertwining(sp.gen, sp.spec, 1.0, g, method="eig")
    r_expm = verify_intertwining(sp.gen, sp.spec, 1.0, g, method="expm")
    assert r_eig < 1e-8 and r_expm < 1e-8


def test_intertwining_time_limit(lf400):
    with pytest.raises(ValueError):
        verify_intertwining(lf400.gen, lf400.spec, 11.0 / lf400.spec.lambda1,
                            np.ones(lf400.grid.N))


def test_reversibility(lf2000):
    Lt = h_transform_generator(lf2000.gen, lf2000.spec)
    assert verify_reversibility(Lt, lf2000.spec) < 1e-10 * reversibility_scale(Lt, lf2000.spec)


def test_reversibility_flat_model():
    sp = Spectral(brownian_model(), 1e-3, 3.0, 200, spacing="uniform")
    Lt = h_transform_generator(sp.gen, sp.spec)
    assert verify_reversibility(Lt, sp.spec) < 1e-12 * reversibility_scale(Lt, sp.spec)


def test_reversibility_negative_control(lf400):
    Lt = h_transform_generator(lf400.gen, lf400.spec)
    rng = np.random.default_rng(3)
    bumped = GeneratorMatrix(lower=Lt.lower * (1 + 1e-3 * rng.random(Lt.N - 1)), diag=Lt.diag,
                             upper=Lt.upper, weights=Lt.weights)
    assert verify_reversibility(bumped, lf400.spec) > 1e-10 * reversibility_scale(Lt, lf400.spec)


def test_alpha_left_eigenvector(lf2000):
    s, L = lf2000.spec, lf2000.gen
    assert np.max(np.abs(L.rmatvec(s.alpha_weights) + s.lambda1 * s.alpha_weights)) \
        < 1e-8 * L.scale()


def test_beta_invariant_for_h_transform(lf2000):
    Lt = h_transform_generator(lf2000.gen, lf2000.spec)
    assert np.max(np.abs(Lt.rmatvec(lf2000.spec.beta_weights))) < 1e-8 * Lt.scale()


def test_grid_convergence_order(logistic):
    lam = [Spectral(logistic, 1e-3, 6.0, N).spec.lambda1 for N in (500, 1000, 2000, 4000)]
    d = np.abs(np.diff(lam))
    assert np.all(np.log2(d[:-1] / d[1:]) >= 1.8)


@pytest.mark.parametrize("fixture", ["lf2000", "cubic1500"])
def test_delta_tilde_finite_and_gap_lower_bound(fixture, request):
    sp = request.getfixturevalue(fixture)
    val, b = delta_tilde(sp.model, sp.spec)
    assert np.isfinite(val) and val > 0
    assert sp.grid.eps < b < sp.grid.R
    assert 1.0 / (4.0 * val) <= sp.spec.gap


@settings(max_examples=8, deadline=None)
@given(st.floats(0.5, 2.0), st.floats(0.5, 2.0), st.floats(0.5, 2.0))
def test_similarity_exact_for_random_models(sigma, r, k):
    m = logistic_feller_model(sigma, r, k)
    sp = Spectral(m, 1e-3, m.domain_hint[1], 300)
    Lt = h_transform_generator(sp.gen, sp.spec)
    ev = eigensystem(Lt).values
    base = eigensystem(sp.gen).values
    assert abs(ev[0]) < 1e-10 * ev[1]
    assert np.max(np.abs(ev[1:20] - (base[1:20] - sp.spec.lambda1)) / ev[1:20]) < 1e-10
    assert verify_reversibility(Lt, sp.spec) < 1e-10 * reversibility_scale(Lt, sp.spec)


def test_cubic_spectral_identities(cubic1500):
    s = cubic1500.spec
    assert np.all(s.eta1 > 0) and sign_changes(s.eta2) == 1
    assert verify_intertwining(cubic1500.gen, s, 1.0, np.ones(cubic1500.grid.N)) < 1e-8


def test_positivity_error_on_bad_eigenvector(lf400, monkeypatch):
    import qsdiff.spectral as sp
    from qsdiff.spectral import PositivityError
    real = sp.eigen_solve

    def flipped(gen, k):
        pairs = real(gen, k)
        e = pairs[0][1].copy()
        e[3] = -e[3]
        return [(pairs[0][0], e)] + pairs[1:]

    monkeypatch.setattr(sp, "eigen_solve", flipped)
    with pytest.raises(PositivityError):
        build_spectral_data(lf400.model, lf400.grid, lf400.gen)


def test_warning_free_construction(logistic):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        Spectral(logistic, 1e-3, 6.0, 200)
