import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from ggdiff.ggd import (ALPHA_MAX, ALPHA_MIN, DegenerateInputError, GgdParams, ggd_beta,
                        ggd_fit, ggd_fit_with_grad, ggd_kld, ggd_kld_grad, ggd_logpdf,
                        ggd_pdf, ggd_ratio, ggd_ratio_dalpha, ggd_sample, log_gamma)

alphas = st.floats(0.3, 8.0)
sigmas = st.floats(0.05, 5.0)


def quad_kld(p1, p2):
    f = lambda x: ggd_pdf(x, p1) * (ggd_logpdf(x, p1) - ggd_logpdf(x, p2))
    b = ggd_beta(p1)
    # integrand is even; split where the bulk ends to help quad
    head = integrate.quad(f, 0, 10 * b, limit=200, epsabs=1e-13, epsrel=1e-11)[0]
    tail = integrate.quad(f, 10 * b, np.inf, limit=200, epsabs=1e-13, epsrel=1e-11)[0]
    return 2 * (head + tail)


@pytest.mark.parametrize("z,expected", [(1.0, 0.0), (0.5, 0.5723649429247001), (6.0, math.log(120))])
def test_log_gamma_values(z, expected):
    assert log_gamma(z) == pytest.approx(expected, rel=1e-12, abs=1e-14)


@given(st.floats(1e-3, 150.0))
def test_log_gamma_matches_math_lgamma(z):
    assert log_gamma(z) == pytest.approx(math.lgamma(z), rel=1e-12, abs=1e-13)


@pytest.mark.parametrize("z", [0.0, -1.0, float("nan")])
def test_log_gamma_rejects_nonpositive(z):
    with pytest.raises(ValueError):
        log_gamma(z)


def test_beta_known_cases():
    assert ggd_beta(GgdParams(2, 1)) == pytest.approx(math.sqrt(2), rel=1e-12)
    assert ggd_beta(GgdParams(1, 1)) == pytest.approx(1 / math.sqrt(2), rel=1e-12)


def test_beta_gives_requested_variance():
    p = GgdParams(4.0, 0.5)
    var = integrate.quad(lambda x: x * x * ggd_pdf(x, p), -np.inf, np.inf)[0]
    assert var == pytest.approx(0.25, rel=1e-8)


def test_pdf_standard_normal_peak():
    assert ggd_pdf(0.0, GgdParams(2, 1)) == pytest.approx(1 / math.sqrt(2 * math.pi), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(alphas, sigmas)
def test_pdf_symmetric_and_normalised(a, s):
    p = GgdParams(a, s)
    x = np.linspace(0, 3 * s, 7)
    assert np.array_equal(ggd_pdf(x, p), ggd_pdf(-x, p))
    total = 2 * integrate.quad(lambda t: ggd_pdf(t, p), 0, np.inf, limit=200)[0]
    assert total == pytest.approx(1.0, abs=1e-7)
    if a >= 1.5:  # lighter tails: [-8 sigma, 8 sigma] already holds the mass
        mass = integrate.quad(lambda t: ggd_pdf(t, p), -8 * s, 8 * s, limit=200)[0]
        assert mass == pytest.approx(1.0, abs=1e-6)


def test_logpdf_consistent():
    p = GgdParams(1.3, 0.7)
    x = np.linspace(-3, 3, 11)
    np.testing.assert_allclose(ggd_logpdf(x, p), np.log(ggd_pdf(x, p)), rtol=1e-12)


def test_sample_moments():
    x = ggd_sample(GgdParams(2, 1.5), 100_000, seed=3)
    assert abs(x.mean()) < 4 * 1.5 / math.sqrt(x.size)
    assert x.var() == pytest.approx(2.25, rel=0.05)
    lap = ggd_sample(GgdParams(1, 1), 100_000, seed=4)
    kurt = np.mean(lap ** 4) / np.mean(lap ** 2) ** 2 - 3
    assert kurt == pytest.approx(3.0, rel=0.10)


def test_sample_deterministic():
    p = GgdParams(0.8, 2.0)
    assert np.array_equal(ggd_sample(p, 50, seed=9), ggd_sample(p, 50, seed=9))
    assert not np.array_equal(ggd_sample(p, 50, seed=9), ggd_sample(p, 50, seed=10))


def test_ratio_values_and_monotone():
    assert ggd_ratio(2.0) == pytest.approx(2 / math.pi, rel=1e-12)
    assert ggd_ratio(1.0) == pytest.approx(0.5, rel=1e-12)
    grid = np.linspace(ALPHA_MIN, ALPHA_MAX, 1000)
    r = np.array([ggd_ratio(a) for a in grid])
    assert np.all(np.diff(r) > 0)
    with pytest.raises(ValueError):
        ggd_ratio(0.01)


@given(st.floats(0.1, 15.0))
def test_ratio_derivative(a):
    h = 1e-6 * a
    fd = (ggd_ratio(a + h) - ggd_ratio(a - h)) / (2 * h)
    assert ggd_ratio_dalpha(a) == pytest.approx(fd, rel=1e-5)


@pytest.mark.parametrize("alpha,sigma,atol_a,atol_s", [(2, 1, 0.1, 0.02), (1, 0.5, 0.05, 0.01)])
def test_fit_recovers(alpha, sigma, atol_a, atol_s):
    p = ggd_fit(ggd_sample(GgdParams(alpha, sigma), 100_000, seed=1))
    assert abs(p.alpha - alpha) <= atol_a
    assert abs(p.sigma - sigma) <= atol_s
    assert not p.clamped


def test_fit_degenerate():
    with pytest.raises(DegenerateInputError):
        ggd_fit(np.zeros(100))
    with pytest.raises(ValueError):
        ggd_fit(np.arange(5.0))


def test_fit_clamps_extreme_ratio():
    # two-point distribution +-1 has ratio 1, above every GGD
    p = ggd_fit(np.tile([1.0, -1.0], 50))
    assert p.clamped and p.alpha == ALPHA_MAX


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_fit_scale_equivariance(seed, c):
    x = ggd_sample(GgdParams(1.4, 1.0), 500, seed=seed)
    p, q = ggd_fit(x), ggd_fit(c * x)
    assert abs(q.alpha - p.alpha) < 1e-6
    assert q.sigma == pytest.approx(c * p.sigma, rel=1e-9)


def test_fit_gradient_matches_finite_differences():
    x = ggd_sample(GgdParams(1.2, 1.0), 64, seed=5)
    p, da, ds = ggd_fit_with_grad(x)
    h = 1e-6
    for i in (0, 7, 33):
        e = np.zeros_like(x)
        e[i] = h
        pp, pm = ggd_fit(x + e), ggd_fit(x - e)
        assert da[i] == pytest.approx((pp.alpha - pm.alpha) / (2 * h), rel=1e-4, abs=1e-8)
        assert ds[i] == pytest.approx((pp.sigma - pm.sigma) / (2 * h), rel=1e-6)


def test_kld_identity_and_printed_form():
    for a in np.linspace(0.3, 8, 10):
        for s in np.linspace(0.1, 4, 10):
            p = GgdParams(a, s)
            assert abs(ggd_kld(p, p)) < 1e-10
            assert ggd_kld(p, p, "as_printed") == pytest.approx(1 / a, abs=1e-12)


def test_kld_gaussian_case():
    expected = math.log(2) + 1 / 8 - 1 / 2
    assert ggd_kld(GgdParams(2, 1), GgdParams(2, 2)) == pytest.approx(expected, abs=1e-12)
    assert quad_kld(GgdParams(2, 1), GgdParams(2, 2)) == pytest.approx(expected, abs=1e-6)


def test_kld_unknown_variant():
    with pytest.raises(ValueError):
        ggd_kld(GgdParams(1, 1), GgdParams(1, 1), "other")


@settings(max_examples=200, deadline=None)
@given(alphas, sigmas, alphas, sigmas)
def test_kld_nonnegative(a1, s1, a2, s2):
    assert ggd_kld(GgdParams(a1, s1), GgdParams(a2, s2)) >= -1e-12


@settings(max_examples=20, deadline=None)
@given(st.floats(0.5, 5), st.floats(0.2, 3), st.floats(0.5, 5), st.floats(0.2, 3))
def test_kld_matches_quadrature(a1, s1, a2, s2):
    p1, p2 = GgdParams(a1, s1), GgdParams(a2, s2)
    ref = quad_kld(p1, p2)
    assert ggd_kld(p1, p2) == pytest.approx(ref, rel=1e-4, abs=1e-9)


@pytest.mark.parametrize("variant", ["corrected", "as_printed"])
@settings(max_examples=25, deadline=None)
@given(a1=st.floats(0.3, 6), s1=st.floats(0.1, 3), a2=st.floats(0.3, 6), s2=st.floats(0.1, 3))
def test_kld_gradient(variant, a1, s1, a2, s2):
    p2 = GgdParams(a2, s2)
    da, ds = ggd_kld_grad(GgdParams(a1, s1), p2, variant)
    h = 1e-6
    fa = (ggd_kld(GgdParams(a1 + h, s1), p2, variant) - ggd_kld(GgdParams(a1 - h, s1), p2, variant)) / (2 * h)
    fs = (ggd_kld(GgdParams(a1, s1 + h), p2, variant) - ggd_kld(GgdParams(a1, s1 - h), p2, variant)) / (2 * h)
    assert da == pytest.approx(fa, rel=1e-5, abs=1e-6)
    assert ds == pytest.approx(fs, rel=1e-5, abs=1e-6)


def test_params_validation_and_dict():
    with pytest.raises(ValueError):
        GgdParams(0, 1)
    with pytest.raises(ValueError):
        GgdParams(1, -1)
    assert GgdParams(1.5, 0.2).to_dict() == {"alpha": 1.5, "sigma": 0.2}
