"""Input validation helpers shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np


class NumericalError(RuntimeError):
    """A solver or factorization failed for numerical reasons."""


def as_vector(x, name, size=None, nonnegative=False):
    v = np.asarray(x, dtype=float)
    if v.ndim != 1:
        raise ValueError(f"{name} must be a 1-d array, got shape {v.shape}")
    if size is not None and v.shape[0] != size:
        raise ValueError(f"{name} must have length {size}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite values")
    if nonnegative and np.any(v < 0):
        raise ValueError(f"{name} must be nonnegative")
    return v


def as_matrix(x, name, shape=None):
    m = np.asarray(x, dtype=float)
    if m.ndim != 2:
        raise ValueError(f"{name} must be a 2-d array, got shape {m.shape}")
    if shape is not None and m.shape != tuple(shape):
        raise ValueError(f"{name} must have shape {tuple(shape)}, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite values")
    return m


def check_symmetric(S, name, tol=1e-8):
    """Validate symmetry up to tol (relative to the largest entry); return the
    symmetrized matrix so downstream eigendecompositions are exact."""
    S = as_matrix(S, name)
    if S.shape[0] != S.shape[1]:
        raise ValueError(f"{name} must be square, got {S.shape}")
    scale = max(1.0, float(np.max(np.abs(S))))
    if np.max(np.abs(S - S.T)) > tol * scale:
        raise ValueError(f"{name} is not symmetric")
    return 0.5 * (S + S.T)


def check_psd(S, name, tol=1e-8):
    """Validate S is symmetric PSD up to a relative eigenvalue tolerance."""
    S = check_symmetric(S, name, tol=max(tol, 1e-8))
    w = np.linalg.eigvalsh(S)
    scale = max(1.0, float(np.trace(S)))
    if w[0] < -tol * scale:
        raise ValueError(f"{name} is not positive semidefinite (min eig {w[0]:.3e})")
    return S


def psd_project(S):
    """Nearest PSD matrix in Frobenius norm: symmetrize, clip negative eigenvalues."""
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    if w[0] >= 0:
        return S
    w = np.clip(w, 0.0, None)
    out = (V * w) @ V.T
    return 0.5 * (out + out.T)


def spd_jitter(S, rel=1e-8):
    """Ridge-stabilize a covariance before inversion: S + rel*(tr(S)/d)*I."""
    d = S.shape[0]
    eps = rel * max(float(np.trace(S)) / d, 1.0)
    return S + eps * np.eye(d)


def ensure_rng(seed):
    """Accept an int seed, a seed sequence, or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def mvn_factor(cov):
    """Eigendecomposition of a covariance for repeated MVN sampling,
    tolerating a slightly indefinite input (eigenvalues clipped at zero)."""
    cov = 0.5 * (cov + cov.T)
    w, V = np.linalg.eigh(cov)
    scale = max(1.0, float(np.trace(cov)))
    if w[0] < -1e-6 * scale:
        raise NumericalError(f"covariance has eigenvalue {w[0]:.3e} < 0")
    return np.sqrt(np.clip(w, 0.0, None)), V


def sample_mvn(mean, cov, n, rng, factor=None):
    """Draw n rows from N(mean, cov); pass factor=mvn_factor(cov) to reuse
    the decomposition across calls (the expensive part on large problems)."""
    mean = np.asarray(mean, float)
    sqrt_w, V = factor if factor is not None else mvn_factor(cov)
    z = rng.standard_normal((n, mean.shape[0]))
    return mean + (z * sqrt_w) @ V.T
