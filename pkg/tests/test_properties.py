"""Property tests for the pure numerical helpers: invariants that must hold
for any input, not just the worked examples."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from odflow.covariance import soft_threshold
from odflow.distances import gaussian_hellinger, gaussian_kl
from odflow.metrics import prmse
from odflow.network import Link, bpr_cost, bpr_cost_derivative
from odflow.validation import psd_project

finite = st.floats(min_value=-1e6, max_value=1e6,
                   allow_nan=False, allow_infinity=False)
small = st.floats(min_value=-50.0, max_value=50.0,
                  allow_nan=False, allow_infinity=False)
positive = st.floats(min_value=1e-3, max_value=1e4,
                     allow_nan=False, allow_infinity=False)


@given(finite, st.floats(min_value=0.0, max_value=1e6, allow_nan=False))
def test_soft_threshold_shrinks_toward_zero(b, lam):
    out = soft_threshold(b, lam)
    assert abs(out) <= abs(b)
    assert abs(out) == max(abs(b) - lam, 0.0) or np.isclose(
        abs(out), max(abs(b) - lam, 0.0))
    if out != 0.0:
        assert np.sign(out) == np.sign(b)


@given(finite,
       st.floats(min_value=0.0, max_value=1e3, allow_nan=False),
       st.floats(min_value=0.0, max_value=1e3, allow_nan=False))
def test_soft_threshold_composes_additively(b, lam1, lam2):
    once = soft_threshold(b, lam1 + lam2)
    twice = soft_threshold(soft_threshold(b, lam1), lam2)
    assert np.isclose(once, twice, atol=1e-9)


def _cov2(a, b, c):
    # always PSD: Gram matrix of two 2-vectors plus a ridge
    g = np.array([[a, b], [0.0, c]])
    return g @ g.T + 0.1 * np.eye(2)


@given(small, small, small, small, small, small, small, small, small, small)
@settings(max_examples=50, deadline=None)
def test_gaussian_distances_are_nonnegative(m1, m2, m3, m4,
                                            a1, b1, c1, a2, b2, c2):
    mu1, mu2 = np.array([m1, m2]), np.array([m3, m4])
    s1, s2 = _cov2(a1, b1, c1), _cov2(a2, b2, c2)
    kl = gaussian_kl(mu1, s1, mu2, s2)
    h = gaussian_hellinger(mu1, s1, mu2, s2)
    assert kl >= -1e-9
    assert -1e-9 <= h <= 1.0 + 1e-9
    # hellinger is symmetric, and both vanish at identical arguments
    assert np.isclose(h, gaussian_hellinger(mu2, s2, mu1, s1),
                      rtol=1e-6, atol=1e-9)
    assert gaussian_kl(mu1, s1, mu1, s1) <= 1e-8
    assert gaussian_hellinger(mu1, s1, mu1, s1) <= 1e-6


@given(small, small, small, small)
@settings(max_examples=50, deadline=None)
def test_psd_project_is_psd_and_idempotent(a, b, c, d):
    s = np.array([[a, b], [c, d]])
    s = 0.5 * (s + s.T)
    p = psd_project(s)
    assert np.all(np.linalg.eigvalsh(p) >= -1e-10)
    assert np.allclose(psd_project(p), p, atol=1e-9)
    # projection leaves a PSD matrix alone
    spd = s @ s.T + np.eye(2)
    assert np.allclose(psd_project(spd), spd, atol=1e-8)


@given(st.floats(min_value=0.0, max_value=1e5, allow_nan=False),
       st.floats(min_value=0.1, max_value=100.0),
       st.floats(min_value=10.0, max_value=1e4),
       st.floats(min_value=0.0, max_value=2.0),
       st.floats(min_value=1.0, max_value=8.0))
@settings(max_examples=100, deadline=None)
def test_bpr_cost_is_monotone_and_above_free_flow(x, t0, cap, alpha, beta):
    link = Link(1, 1, 2, t0, cap, alpha=alpha, beta=beta)
    c = bpr_cost(link, x)
    assert c >= t0
    assert bpr_cost(link, x + 1.0) >= c
    assert bpr_cost_derivative(link, x) >= 0.0


@given(st.lists(st.floats(min_value=0.0, max_value=1e4, allow_nan=False),
                min_size=1, max_size=6),
       st.lists(st.floats(min_value=1.0, max_value=1e4, allow_nan=False),
                min_size=1, max_size=6))
@settings(max_examples=100, deadline=None)
def test_prmse_nonnegative_and_zero_only_at_match(q_hat, q_true):
    k = min(len(q_hat), len(q_true))
    q_hat, q_true = np.array(q_hat[:k]), np.array(q_true[:k])
    v = prmse(q_hat, q_true)
    assert v >= 0.0
    assert prmse(q_true, q_true) == 0.0
    if not np.allclose(q_hat, q_true):
        assert v > 0.0
