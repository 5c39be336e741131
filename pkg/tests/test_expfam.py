import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from kernel_ep import expfam
from kernel_ep.errors import (
    DegenerateStats,
    FamilyMismatch,
    ImproperInput,
    ImproperParameters,
    NonFiniteInput,
    OutOfSupport,
    ParseError,
)
from kernel_ep.expfam import ExpFamMessage as M, Family, SuffStats

pos = st.floats(0.05, 50.0)
means = st.floats(-20.0, 20.0)


def gaussians():
    return st.builds(M.gaussian, means, st.floats(0.01, 50.0))


def betas():
    return st.builds(M.beta, pos, pos)


def gammas():
    return st.builds(M.gamma, pos, st.floats(0.05, 20.0))


messages = st.one_of(gaussians(), betas(), gammas())


def pair(strategy):
    return st.tuples(strategy, strategy)


same_family_pairs = st.one_of(pair(gaussians()), pair(betas()), pair(gammas()))


# -- constructors -----------------------------------------------------------

def test_natural_mappings():
    assert M.gaussian(0, 1).natural == (0.0, -0.5)
    assert M.beta(1, 2).natural == (0.0, 1.0)
    assert M.gamma(3, 0.25).natural == (2.0, -0.25)


@pytest.mark.parametrize("family,p", [("gaussian", (0, 0)), ("gaussian", (0, -1)),
                                      ("beta", (0, 1)), ("gamma", (1, -2))])
def test_from_moments_rejects_bad_parameters(family, p):
    with pytest.raises(ImproperParameters):
        expfam.from_moments(family, *p)


def test_from_moments_rejects_non_finite():
    with pytest.raises(NonFiniteInput):
        M.gaussian(float("nan"), 1.0)
    with pytest.raises(NonFiniteInput):
        M(Family.BETA, (math.inf, 0.0))


def test_uniform_flags():
    u = M.uniform("gamma")
    assert u.is_uniform and not u.is_proper
    assert not M.gaussian(0, 1).is_uniform


@given(messages)
def test_moment_round_trip(m):
    again = expfam.from_moments(m.family, *m.params())
    np.testing.assert_allclose(again.natural, m.natural, rtol=1e-12, atol=1e-12)


# -- algebra ----------------------------------------------------------------

def test_divide_examples():
    q = expfam.divide(M.gaussian(0, 1), M.gaussian(0, 2))
    assert q.params() == pytest.approx((0.0, 2.0))
    m = M.beta(3, 4)
    assert expfam.divide(m, M.uniform("beta")) == m
    imp = expfam.divide(M.gaussian(0, 2), M.gaussian(0, 1))
    assert not imp.is_proper
    assert -2 * imp.natural[1] == pytest.approx(-0.5)


def test_multiply_examples():
    assert (M.gaussian(0, 1) * M.gaussian(0, 1)).params() == pytest.approx((0.0, 0.5))
    assert (M.beta(1, 2) * M.beta(2, 1)).params() == pytest.approx((2.0, 2.0))
    m = M.gamma(2, 3)
    assert m * M.uniform("gamma") == m


def test_family_mismatch():
    with pytest.raises(FamilyMismatch):
        expfam.divide(M.gaussian(0, 1), M.beta(1, 1))
    with pytest.raises(FamilyMismatch):
        expfam.kl_divergence(M.gaussian(0, 1), M.gamma(1, 1))


@given(same_family_pairs)
def test_divide_undoes_multiply(ab):
    a, b = ab
    back = expfam.divide(expfam.multiply(a, b), b)
    np.testing.assert_allclose(back.natural, a.natural, rtol=1e-12, atol=1e-12)


# -- projection -------------------------------------------------------------

def test_gaussian_projection():
    m = expfam.project_from_suffstats("gaussian", SuffStats("gaussian", (0.0, 1.0)))
    assert m.params() == pytest.approx((0.0, 1.0))
    with pytest.raises(DegenerateStats):
        expfam.project_from_suffstats("gaussian", SuffStats("gaussian", (1.0, 1.0)))


def test_gamma_projection_from_quadrature_moments():
    # forward moments by scipy quadrature, independent of the package
    dist = stats.gamma(a=2.0, scale=1.0 / 3.0)
    e_log = integrate.quad(lambda x: math.log(x) * dist.pdf(x), 0, np.inf, epsabs=1e-13)[0]
    e_x = integrate.quad(lambda x: x * dist.pdf(x), 0, np.inf, epsabs=1e-13)[0]
    m = expfam.project_from_suffstats("gamma", SuffStats("gamma", (e_log, e_x)))
    assert m.params() == pytest.approx((2.0, 3.0), rel=1e-8)


def test_beta_projection_from_quadrature_moments():
    dist = stats.beta(2.5, 0.7)
    l1 = integrate.quad(lambda x: math.log(x) * dist.pdf(x), 0, 1, epsabs=1e-13, limit=200)[0]
    l2 = integrate.quad(lambda x: math.log1p(-x) * dist.pdf(x), 0, 1, epsabs=1e-13, limit=200)[0]
    m = expfam.project_from_suffstats("beta", SuffStats("beta", (l1, l2)))
    assert m.params() == pytest.approx((2.5, 0.7), rel=1e-7)


@pytest.mark.parametrize("s", [(0.1, -1.0), (-0.1, -0.1)])
def test_unattainable_beta_stats(s):
    with pytest.raises(DegenerateStats):
        expfam.project_from_suffstats("beta", SuffStats("beta", s))


def test_unattainable_gamma_stats():
    # Jensen: E ln x < ln E x for every non-degenerate Gamma
    with pytest.raises(DegenerateStats):
        expfam.project_from_suffstats("gamma", SuffStats("gamma", (1.0, math.e)))


def test_gaussian_variance_floor():
    m = expfam.project_from_suffstats("gaussian", SuffStats("gaussian", (0.0, 1e-14)))
    assert m.variance() >= expfam.MIN_GAUSSIAN_VARIANCE


@given(messages)
@settings(max_examples=150, deadline=None)
def test_projection_inverts_suffstats(m):
    back = expfam.project_from_suffstats(m.family, expfam.to_suffstats(m))
    np.testing.assert_allclose(back.params(), m.params(), rtol=1e-8)


@pytest.mark.parametrize("m", [M.beta(1e6, 1e6), M.gamma(1e5, 2.0), M.beta(0.05, 0.05),
                               M.gamma(0.05, 10.0)])
def test_projection_extreme_parameters(m):
    back = expfam.project_from_suffstats(m.family, expfam.to_suffstats(m))
    np.testing.assert_allclose(back.params(), m.params(), rtol=1e-6)


def test_suffstats_validity():
    assert SuffStats("gaussian", (0.0, 1.0)).is_valid
    assert not SuffStats("gaussian", (1.0, 1.0)).is_valid
    assert not SuffStats("gamma", (0.0, -1.0)).is_valid
    assert not SuffStats("beta", (-0.1, -0.1)).is_valid


# -- KL -----------------------------------------------------------------------

def test_kl_examples():
    assert expfam.kl_divergence(M.gaussian(0, 1), M.gaussian(0, 1)) == 0.0
    assert expfam.kl_divergence(M.gaussian(1, 1), M.gaussian(0, 1)) == pytest.approx(0.5)
    assert expfam.kl_divergence(M.gamma(2, 1), M.gamma(2, 1)) == pytest.approx(0.0, abs=1e-14)


@pytest.mark.parametrize("p,q", [(M.beta(2, 5), M.beta(1.5, 1.2)), (M.gamma(3, 2), M.gamma(1.2, 0.7))])
def test_kl_against_quadrature(p, q):
    lo, hi = (0, 1) if p.family is Family.BETA else (0, np.inf)
    ref = integrate.quad(lambda x: math.exp(expfam.log_pdf(p, x)) *
                         (expfam.log_pdf(p, x) - expfam.log_pdf(q, x)), lo, hi, limit=200)[0]
    assert expfam.kl_divergence(p, q) == pytest.approx(ref, rel=1e-7)


@given(same_family_pairs)
def test_kl_nonnegative_and_zero_at_equality(ab):
    a, b = ab
    assert expfam.kl_divergence(a, b) >= 0.0
    assert expfam.kl_divergence(a, a) <= 1e-12


def test_kl_requires_proper():
    with pytest.raises(ImproperInput):
        expfam.kl_divergence(M.uniform("gaussian"), M.gaussian(0, 1))


# -- sampling and densities -----------------------------------------------------

def test_sample_near_degenerate():
    x = expfam.sample(M.gaussian(5.0, 1e-12), 1000, np.random.default_rng(0))
    assert np.all(np.abs(x - 5.0) < 1e-5)


def test_sample_beta_mean():
    x = expfam.sample(M.beta(1, 1), 10**6, np.random.default_rng(1))
    assert abs(x.mean() - 0.5) < 0.002


def test_sample_uniform_rejected():
    with pytest.raises(ImproperInput):
        expfam.sample(M.uniform("gaussian"), 10, np.random.default_rng(0))


@pytest.mark.parametrize("m", [M.gaussian(-1.0, 2.0), M.beta(2.0, 0.5), M.gamma(0.7, 3.0)])
def test_sample_suffstats_match(m):
    x = expfam.sample(m, 10**5, np.random.default_rng(2))
    if m.family is Family.GAUSSIAN:
        u = np.stack([x, x * x])
    elif m.family is Family.BETA:
        u = np.stack([np.log(x), np.log1p(-x)])
    else:
        u = np.stack([np.log(x), x])
    se = u.std(axis=1) / math.sqrt(x.size)
    assert np.all(np.abs(u.mean(axis=1) - expfam.to_suffstats(m).as_array()) < 4 * se)


def test_log_pdf_examples():
    assert expfam.log_pdf(M.gaussian(0, 1), 0.0) == pytest.approx(-0.9189385332)
    assert expfam.log_pdf(M.beta(1, 1), 0.3) == pytest.approx(0.0, abs=1e-14)
    assert expfam.log_pdf(M.gamma(1, 1), 0.0) == pytest.approx(0.0, abs=1e-14)
    with pytest.raises(OutOfSupport):
        expfam.log_pdf(M.beta(2, 2), 1.5)
    with pytest.raises(OutOfSupport):
        expfam.log_pdf(M.gamma(2, 2), -0.1)


@pytest.mark.parametrize("m,lo,hi", [(M.gaussian(1.0, 0.3), -np.inf, np.inf), (M.beta(0.6, 3.0), 0, 1),
                                     (M.gamma(2.5, 0.4), 0, np.inf)])
def test_log_pdf_normalised(m, lo, hi):
    total = integrate.quad(lambda x: math.exp(expfam.log_pdf(m, x)), lo, hi, limit=200)[0]
    assert total == pytest.approx(1.0, abs=1e-6)


# -- text form ----------------------------------------------------------------

@given(messages)
def test_text_round_trip(m):
    assert M.from_text(m.to_text()) == m


def test_text_parse_error():
    with pytest.raises(ParseError):
        M.from_text("poisson:1,2")
    with pytest.raises(ParseError):
        M.from_text("gaussian:1")
