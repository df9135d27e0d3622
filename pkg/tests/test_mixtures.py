import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special

from sparseseg.mixtures import (
    BetaParams,
    GammaParams,
    JointParams,
    MixtureFitError,
    MixtureModel,
    component_pdf,
    digamma,
    fit_mixture_em,
    posterior_from_densities,
    reliable_posterior,
    responsibilities,
    trigamma,
)


def gamma_draws(rng, n, w, p1, p2):
    k = rng.random(n) < w
    return np.where(k, rng.gamma(p1[0], 1 / p1[1], n), rng.gamma(p2[0], 1 / p2[1], n))


def beta_draws(rng, n, w, p1, p2):
    k = rng.random(n) < w
    return np.where(k, rng.beta(*p1, n), rng.beta(*p2, n))


# ---------------------------------------------------------------------------
# densities


def test_pdf_examples():
    assert component_pdf(GammaParams(1, 1), 2.0) == pytest.approx(math.exp(-2), rel=1e-12)
    assert component_pdf(GammaParams(2, 3), 1.0) == pytest.approx(9 * math.exp(-3), rel=1e-12)
    assert component_pdf(BetaParams(2, 2), 0.5) == pytest.approx(1.5, rel=1e-12)


def test_joint_is_product():
    j = JointParams(2, 5, 3, 4)
    x = np.array([[0.7, 0.2], [1.5, 0.9]])
    expected = component_pdf(GammaParams(3, 4), x[:, 0]) * component_pdf(BetaParams(2, 5), x[:, 1])
    np.testing.assert_allclose(component_pdf(j, x), expected, rtol=1e-12)


def test_pdf_outside_support_is_zero():
    assert component_pdf(GammaParams(2, 1), -1.0) == 0.0
    assert component_pdf(BetaParams(2, 2), 1.0) == 0.0
    assert component_pdf(JointParams(2, 2, 2, 2), np.array([1.0, 1.5])) == 0.0


def test_invalid_params():
    for bad in (0, -1, float("inf"), float("nan")):
        with pytest.raises(ValueError):
            GammaParams(bad, 1)
        with pytest.raises(ValueError):
            BetaParams(1, bad)


def tensor_gauss(j, n=300, upper=60.0):
    # product Gauss-Legendre rule on [0, upper] x [0, 1]; gamma mass beyond 60 is negligible here
    t, w = np.polynomial.legendre.leggauss(n)
    u, wu = (t + 1) * upper / 2, w * upper / 2
    s, ws = (t + 1) / 2, w / 2
    U, S = np.meshgrid(u, s, indexing="ij")
    dens = component_pdf(j, np.column_stack([U.ravel(), S.ravel()])).reshape(n, n)
    return float(wu @ dens @ ws)


def test_densities_integrate_to_one():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, b = rng.uniform(0.5, 12, 2)
        g = GammaParams(a, b)
        val, _ = integrate.quad(lambda x: component_pdf(g, x), 0, np.inf, limit=200)
        assert val == pytest.approx(1, abs=1e-3)
        be = BetaParams(a, rng.uniform(0.5, 12))
        val, _ = integrate.quad(lambda x: component_pdf(be, x), 0, 1, limit=200)
        assert val == pytest.approx(1, abs=1e-3)
        j = JointParams(*rng.uniform(1, 8, 4))
        assert tensor_gauss(j) == pytest.approx(1, abs=1e-3)


def test_pdf_matches_scipy():
    from scipy import stats
    x = np.linspace(0.01, 0.99, 50)
    np.testing.assert_allclose(component_pdf(BetaParams(2.5, 0.7), x), stats.beta(2.5, 0.7).pdf(x), rtol=1e-10)
    np.testing.assert_allclose(component_pdf(GammaParams(3.3, 2.0), x * 5),
                               stats.gamma(3.3, scale=0.5).pdf(x * 5), rtol=1e-10)


# ---------------------------------------------------------------------------
# special functions


def test_digamma_values():
    assert digamma(1.0) == pytest.approx(-0.5772156649015329, abs=1e-10)
    assert digamma(2.0) == pytest.approx(0.4227843350984671, abs=1e-10)
    with pytest.raises(ValueError):
        digamma(0.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-3, 1e3))
def test_digamma_recurrence_and_oracle(x):
    assert digamma(x + 1) - digamma(x) == pytest.approx(1 / x, abs=1e-12 * max(1, 1 / x))
    assert digamma(x) == pytest.approx(special.digamma(x), abs=1e-10)
    assert trigamma(x) == pytest.approx(special.polygamma(1, x), rel=1e-9)


# ---------------------------------------------------------------------------
# responsibilities


def test_responsibility_examples():
    g = GammaParams(2, 1)
    same = MixtureModel((0.5, 0.5), (g, g), "gamma")
    np.testing.assert_allclose(responsibilities(same, [0.1, 1, 7]), 0.5)
    np.testing.assert_allclose(reliable_posterior(same, [0.3]), [0.5])
    np.testing.assert_allclose(posterior_from_densities((0.5, 0.5), 0.8, 0.2), [[0.8, 0.2]])
    np.testing.assert_allclose(posterior_from_densities((0.9, 0.1), 0.3, 0.3), [[0.9, 0.1]])
    assert np.all(np.isnan(posterior_from_densities((0.5, 0.5), 0.0, 0.0)))


def test_responsibilities_nan_outside_support():
    m = MixtureModel((0.5, 0.5), (BetaParams(2, 2), BetaParams(3, 1)), "beta")
    r = responsibilities(m, [-0.5, 0.5])
    assert np.all(np.isnan(r[0]))
    assert r[1].sum() == pytest.approx(1)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.3, 10), st.floats(0.3, 10), st.floats(0.3, 10), st.floats(0.3, 10))
def test_posterior_flip(w, a1, b1, a2, b2):
    m = MixtureModel((w, 1 - w), (GammaParams(a1, b1), GammaParams(a2, b2)), "gamma")
    x = np.linspace(0.05, 10, 40)
    p = reliable_posterior(m, x)
    q = reliable_posterior(m.swapped(), x)
    ok = np.isfinite(p)
    np.testing.assert_allclose(p[ok], 1 - q[ok], atol=1e-12)


# ---------------------------------------------------------------------------
# EM


def test_gamma_recovery():
    rng = np.random.default_rng(1)
    x = gamma_draws(rng, 50_000, 0.6, (2, 4), (8, 1))
    m, diag = fit_mixture_em(x, "gamma")
    assert diag.is_monotone()
    assert m.weights[0] == pytest.approx(0.6, abs=0.03)
    np.testing.assert_allclose([m.components[0].a, m.components[0].b], [2, 4], rtol=0.1)
    np.testing.assert_allclose([m.components[1].a, m.components[1].b], [8, 1], rtol=0.1)


def test_beta_recovery():
    rng = np.random.default_rng(2)
    x = beta_draws(rng, 50_000, 0.6, (2, 5), (5, 2))
    m, diag = fit_mixture_em(x, "beta", iterations=500)
    assert diag.is_monotone()
    assert m.weights[0] == pytest.approx(0.6, abs=0.03)
    np.testing.assert_allclose([m.components[0].a, m.components[0].b], [2, 5], rtol=0.1)
    np.testing.assert_allclose([m.components[1].a, m.components[1].b], [5, 2], rtol=0.1)


def test_joint_recovery():
    rng = np.random.default_rng(3)
    n = 20_000
    k = rng.random(n) < 0.5
    u = np.where(k, rng.gamma(2, 1 / 8, n), rng.gamma(6, 1, n))
    s = np.where(k, rng.beta(2, 8, n), rng.beta(6, 3, n))
    m, diag = fit_mixture_em(np.column_stack([u, s]), "joint")
    assert diag.is_monotone()
    rel = m.components[0]
    assert m.weights[0] == pytest.approx(0.5, abs=0.03)
    np.testing.assert_allclose([rel.gamma_c, rel.gamma_d, rel.beta_a, rel.beta_b], [2, 8, 2, 8], rtol=0.1)


@pytest.mark.xfail(strict=True, reason="two-component fit of a single beta has a flat likelihood ridge; "
                                       "EM settles on a split of the same density instead")
def test_single_beta_degenerate():
    x = np.random.default_rng(4).beta(2, 5, 50_000)
    m, _ = fit_mixture_em(x, "beta")
    one_weight = max(m.weights) >= 0.95
    both_close = all(abs(c.a - 2) <= 0.3 and abs(c.b - 5) <= 0.75 for c in m.components)
    assert one_weight or both_close


def test_single_beta_density_is_recovered():
    # what EM does guarantee on single-component data: the mixture density matches the source
    from scipy import stats
    x = np.random.default_rng(4).beta(2, 5, 20_000)
    m, _ = fit_mixture_em(x, "beta")
    grid = np.linspace(0.02, 0.9, 45)
    mix = sum(w * component_pdf(c, grid) for w, c in zip(m.weights, m.components))
    np.testing.assert_allclose(mix, stats.beta(2, 5).pdf(grid), atol=0.06)


def test_monotone_over_random_fits():
    rng = np.random.default_rng(5)
    for k in range(100):
        kind = ("gamma", "beta", "joint")[k % 3]
        n = int(rng.integers(30, 800))
        if kind == "gamma":
            x = gamma_draws(rng, n, rng.uniform(0.1, 0.9), rng.uniform(0.5, 10, 2), rng.uniform(0.5, 10, 2))
        elif kind == "beta":
            x = beta_draws(rng, n, rng.uniform(0.1, 0.9), rng.uniform(0.5, 10, 2), rng.uniform(0.5, 10, 2))
        else:
            x = np.column_stack([rng.gamma(rng.uniform(1, 5), 1, n), rng.beta(*rng.uniform(0.5, 6, 2), n)])
        m, diag = fit_mixture_em(x, kind)
        assert diag.is_monotone(), (k, kind)
        assert abs(sum(m.weights) - 1) < 1e-12 and min(m.weights) >= 0


def test_reliable_component_first():
    rng = np.random.default_rng(6)
    m, _ = fit_mixture_em(gamma_draws(rng, 5000, 0.3, (8, 1), (2, 4)), "gamma")
    assert m.components[0].mean() < m.components[1].mean()
    assert reliable_posterior(m, [m.components[0].a / m.components[0].b])[0] > 0.5
    tail = reliable_posterior(m, np.linspace(20, 60, 30))
    assert np.all(np.diff(tail) <= 1e-15) and tail[-1] < 1e-6


def test_fit_errors():
    with pytest.raises(MixtureFitError):
        fit_mixture_em(np.full(50, 0.3), "gamma")
    with pytest.raises(MixtureFitError):
        fit_mixture_em(np.linspace(0.1, 1, 19), "gamma")
    with pytest.raises(ValueError):
        fit_mixture_em(np.linspace(0.1, 1, 50), "poisson")


def test_beta_boundary_samples_clamped():
    x = np.r_[np.zeros(5), np.ones(5), np.random.default_rng(7).beta(2, 3, 200)]
    m, diag = fit_mixture_em(x, "beta")
    assert diag.samples_used == 210


def test_model_json_round_trip():
    rng = np.random.default_rng(8)
    m, _ = fit_mixture_em(gamma_draws(rng, 500, 0.5, (2, 4), (8, 1)), "gamma")
    back = MixtureModel.from_dict(__import__("json").loads(m.to_json()))
    assert back == m
    assert back.diagnostics.log_likelihood_trace == m.diagnostics.log_likelihood_trace
