"""Closed-form distances between multivariate Gaussians, used for the outer
stopping rule and the reporting metrics."""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .validation import as_vector, check_psd, spd_jitter


def _prep(mu1, s1, mu2, s2):
    mu1 = as_vector(mu1, "mu1")
    mu2 = as_vector(mu2, "mu2", size=mu1.shape[0])
    s1 = check_psd(np.asarray(s1, dtype=float), "sigma1", tol=1e-6)
    s2 = check_psd(np.asarray(s2, dtype=float), "sigma2", tol=1e-6)
    if s1.shape[0] != mu1.shape[0] or s2.shape[0] != mu1.shape[0]:
        raise ValueError("dimension mismatch between means and covariances")
    return mu1, spd_jitter(s1), mu2, spd_jitter(s2)


def _logdet(s):
    sign, ld = np.linalg.slogdet(s)
    if sign <= 0:
        raise ValueError("covariance is not positive definite")
    return ld


def gaussian_hellinger(mu1, sigma1, mu2, sigma2):
    """Squared Hellinger distance between N(mu1, sigma1) and N(mu2, sigma2):

        1 - [det(S1)^(1/4) det(S2)^(1/4) / det(M)^(1/2)]
            * exp(-1/8 (mu2-mu1)' M^{-1} (mu2-mu1)),   M = (S1+S2)/2

    Bounded in [0, 1]; symmetric in its arguments.
    """
    mu1, s1, mu2, s2 = _prep(mu1, sigma1, mu2, sigma2)
    m = 0.5 * (s1 + s2)
    log_bc = 0.25 * _logdet(s1) + 0.25 * _logdet(s2) - 0.5 * _logdet(m)
    d = mu2 - mu1
    maha = float(d @ cho_solve(cho_factor(m), d))
    val = 1.0 - np.exp(log_bc - maha / 8.0)
    return float(min(max(val, 0.0), 1.0))


def gaussian_kl(mu1, sigma1, mu2, sigma2):
    """KL divergence KL(N(mu1, sigma1) || N(mu2, sigma2)):

        1/2 [ log det(S2)/det(S1) - d + tr(S2^{-1} S1)
              + (mu2-mu1)' S2^{-1} (mu2-mu1) ]

    Nonnegative, zero iff the distributions match; not symmetric.
    """
    mu1, s1, mu2, s2 = _prep(mu1, sigma1, mu2, sigma2)
    d = mu1.shape[0]
    factor = cho_factor(s2)
    tr = float(np.trace(cho_solve(factor, s1)))
    diff = mu2 - mu1
    maha = float(diff @ cho_solve(factor, diff))
    val = 0.5 * (_logdet(s2) - _logdet(s1) - d + tr + maha)
    return float(max(val, 0.0))
