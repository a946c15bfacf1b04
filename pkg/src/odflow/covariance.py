"""Sparse estimation of the OD demand covariance from day-to-day counts.

Given the empirical covariance S of the observed link counts, the route
choice p~ and the current demand mean, fit Sigma_q by penalized least squares

    min_{Sigma psd}  || S - (C0 + D Sigma D') ||_F^2  +  lam ||Sigma||_1

with D = Delta_o p~ and C0 = Delta_o S_f|q Delta_o' (the multinomial route
choice part, fixed given the mean). The l1 penalty covers the diagonal.
Solved by proximal gradient (ISTA) or its accelerated variant (FISTA):
gradient step on the smooth part, entrywise soft-threshold, symmetrize and
project onto the PSD cone, with backtracking line search on the step.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .assignment import _sandwich, conditional_path_cov
from .validation import NumericalError, check_symmetric, psd_project, spd_jitter

ZERO_TOL = 1e-8


@dataclass
class EmpiricalCov:
    """Sample covariances of the observed counts: s_x is the MLE (1/n),
    p_x the unbiased version (1/(n-1), None when n < 2)."""

    s_x: np.ndarray
    p_x: np.ndarray | None
    n: int


def empirical_cov(obs):
    x = obs.counts
    n = x.shape[0]
    if n < 1:
        raise ValueError("need at least one day of observations")
    centered = x - x.mean(axis=0)
    s = centered.T @ centered
    s_x = s / n
    p_x = s / (n - 1) if n >= 2 else None
    return EmpiricalCov(s_x=0.5 * (s_x + s_x.T), p_x=None if p_x is None else 0.5 * (p_x + p_x.T), n=n)


class _Problem:
    """Precomputed pieces of the covariance fit for one (p~, q_hat)."""

    def __init__(self, s_x, path_set, route_choice, q_hat):
        self.d = (path_set.delta_obs @ route_choice.p_tilde).tocsr()
        m = self.d.shape[0]
        self.s = check_symmetric(np.asarray(s_x, dtype=float), "s_x")
        if self.s.shape[0] != m:
            raise ValueError("s_x dimension does not match observed links")
        cond = conditional_path_cov(route_choice, q_hat)
        d_obs = path_set.delta_obs
        self.c0 = (d_obs @ cond @ d_obs.T).toarray()
        self.base = self.c0 - self.s
        self.n_od = path_set.n_od

    def implied(self, sigma):
        return _sandwich(self.d, sigma) + self.c0

    def residual(self, sigma):
        return _sandwich(self.d, sigma) + self.base

    def smooth(self, sigma):
        r = self.residual(sigma)
        return float(np.sum(r * r))

    def grad(self, sigma):
        r = self.residual(sigma)
        t = self.d.T @ r  # K_q x m
        g = (self.d.T @ t.T).T  # = D' r D, r symmetric
        if hasattr(g, "toarray"):
            g = g.toarray()
        g = np.asarray(g)
        return g + g.T  # 2 D' r D, symmetrized

    def lipschitz(self):
        # grad is sigma -> 2 D'D sigma D'D, so L = 2 lmax(D'D)^2
        rng = np.random.default_rng(54321)
        v = rng.standard_normal(self.n_od)
        v /= np.linalg.norm(v)
        lam = 1.0
        for _ in range(100):
            hv = self.d.T @ (self.d @ v)
            lam = float(np.linalg.norm(hv))
            if lam <= 0:
                return 2.0
            v = hv / lam
        return 2.0 * lam**2


def soft_threshold(beta, lam):
    """Entrywise shrinkage: sign(b) * max(|b| - lam, 0)."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    b = np.asarray(beta, dtype=float)
    out = np.sign(b) * np.maximum(np.abs(b) - lam, 0.0)
    return out if out.ndim else float(out)


def lasso_objective(sigma_q, s_x, path_set, route_choice, q_hat, lam):
    """Penalized fit ||S - (C0 + D Sigma D')||_F^2 + lam * ||Sigma||_1."""
    prob = _Problem(s_x, path_set, route_choice, q_hat)
    sigma_q = np.asarray(sigma_q, dtype=float)
    return prob.smooth(sigma_q) + lam * float(np.sum(np.abs(sigma_q)))


def smooth_gradient(sigma_q, s_x, path_set, route_choice, q_hat):
    """Gradient of the smooth part: 2 D' (D Sigma D' + C0 - S) D."""
    prob = _Problem(s_x, path_set, route_choice, q_hat)
    return prob.grad(np.asarray(sigma_q, dtype=float))


def lambda_max(s_x, path_set, route_choice, q_hat):
    """Smallest penalty at which the all-zero matrix is optimal:
    the max-norm of the smooth gradient at zero."""
    prob = _Problem(s_x, path_set, route_choice, q_hat)
    g0 = prob.grad(np.zeros((prob.n_od, prob.n_od)))
    return float(np.max(np.abs(g0)))


def wishart_nll(sigma_q, s_x, path_set, route_choice, q_hat):
    """Gaussian/Wishart log-likelihood diagnostic of the implied observed-link
    covariance against the sample covariance:
    -(log det(Sigma_o^{-1}) - tr(S Sigma_o^{-1})). Lower is better; reported
    only, never optimized."""
    prob = _Problem(s_x, path_set, route_choice, q_hat)
    implied = spd_jitter(prob.implied(np.asarray(sigma_q, dtype=float)))
    factor = cho_factor(implied)
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    tr = float(np.trace(cho_solve(factor, prob.s)))
    return logdet + tr


@dataclass
class LassoConfig:
    lam: float = 0.0
    algorithm: str = "fista"
    max_iters: int = 500
    tol: float = 1e-8
    backtrack: float = 0.5
    step_init: float | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.algorithm not in ("ista", "fista"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if not 0.0 < self.backtrack < 1.0:
            raise ValueError("backtrack factor must be in (0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class CovEstimate:
    sigma_q_hat: np.ndarray
    objective_trace: np.ndarray = field(default_factory=lambda: np.empty(0))
    n_iter: int = 0
    converged: bool = False
    lam: float = 0.0

    @property
    def nnz(self):
        return int(np.sum(np.abs(self.sigma_q_hat) > ZERO_TOL))


def _prox_step(z, t, lam):
    out = soft_threshold(z, t * lam)
    return psd_project(out)


def solve_sigma_q(s_x, path_set, route_choice, q_hat, config=None, warm_start=None):
    """Fit the demand covariance by proximal gradient.

    Parameters
    ----------
    s_x : empirical covariance of the observed counts (MLE normalization)
    path_set, route_choice, q_hat : fix D and the multinomial part C0
    config : LassoConfig; config.lam = 0 gives the unpenalized PSD fit
    warm_start : starting matrix (projected to PSD); zero matrix by default

    Notes
    -----
    ISTA backtracks until both the quadratic majorization test and composite
    descent hold, so its objective trace is nonincreasing. FISTA adds the
    momentum term v = x_k + (k-2)/(k+1) (x_k - x_{k-1}) and is allowed to be
    locally non-monotone. Either way each iterate is symmetric PSD. Raises
    NumericalError if the objective exceeds 10x its initial value.
    """
    cfg = config or LassoConfig()
    prob = _Problem(s_x, path_set, route_choice, q_hat)
    d = prob.n_od
    if warm_start is not None:
        x = psd_project(np.asarray(warm_start, dtype=float))
        if x.shape != (d, d):
            raise ValueError("warm_start has the wrong shape")
    else:
        x = np.zeros((d, d))
    lam = cfg.lam
    t = cfg.step_init if cfg.step_init is not None else 1.0 / prob.lipschitz()

    def composite(s):
        return prob.smooth(s) + lam * float(np.sum(np.abs(s)))

    f0 = composite(x)
    guard = 10.0 * max(f0, 1.0)
    trace = [f0]
    x_prev = x
    converged = False
    n_iter = 0
    for k in range(1, cfg.max_iters + 1):
        n_iter = k
        if cfg.algorithm == "fista":
            mom = (k - 2.0) / (k + 1.0) if k >= 2 else 0.0
            y = x + mom * (x - x_prev)
        else:
            y = x
        fy = prob.smooth(y)
        gy = prob.grad(y)
        accepted = None
        for _ in range(60):
            cand = _prox_step(y - t * gy, t, lam)
            dlt = cand - y
            quad = fy + float(np.sum(gy * dlt)) + float(np.sum(dlt * dlt)) / (2.0 * t)
            ok = prob.smooth(cand) <= quad + 1e-12 * max(1.0, abs(fy))
            if ok and cfg.algorithm == "ista":
                # composite descent safeguard; projection after thresholding
                # is not the exact prox, so monotonicity needs its own check
                ok = composite(cand) <= trace[-1] + 1e-12 * max(1.0, abs(trace[-1]))
            if ok:
                accepted = cand
                break
            t *= cfg.backtrack
        if accepted is None:
            accepted = _prox_step(y - t * gy, t, lam)
        x_prev = x
        x = accepted
        fx = composite(x)
        trace.append(fx)
        if fx > guard:
            raise NumericalError(
                f"covariance solve diverged: objective {fx:.3e} > 10x initial {f0:.3e}"
            )
        rel = float(np.linalg.norm(x - x_prev)) / (1.0 + float(np.linalg.norm(x_prev)))
        if rel <= cfg.tol:
            converged = True
            break
    return CovEstimate(
        sigma_q_hat=x,
        objective_trace=np.asarray(trace),
        n_iter=n_iter,
        converged=converged,
        lam=lam,
    )


def lasso_path(s_x, path_set, route_choice, q_hat, grid, config=None,
               warm_start=True, jobs=1):
    """Solve the covariance fit over a penalty grid.

    With warm_start each solution seeds the next grid point (run the grid in
    ascending order); with warm_start=False the points are independent and may
    run on jobs > 1 threads.
    """
    cfg = config or LassoConfig()
    grid = [float(g) for g in grid]
    if any(g < 0 for g in grid):
        raise ValueError("penalty grid must be nonnegative")
    if warm_start:
        out = []
        prev = None
        for g in grid:
            est = solve_sigma_q(
                s_x, path_set, route_choice, q_hat,
                replace(cfg, lam=g), warm_start=prev,
            )
            prev = est.sigma_q_hat
            out.append(est)
        return out
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(
                pool.map(
                    lambda g: solve_sigma_q(
                        s_x, path_set, route_choice, q_hat, replace(cfg, lam=g)
                    ),
                    grid,
                )
            )
    return [
        solve_sigma_q(s_x, path_set, route_choice, q_hat, replace(cfg, lam=g))
        for g in grid
    ]
