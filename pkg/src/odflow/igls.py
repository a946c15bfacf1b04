"""Iterative generalized least squares for the full demand distribution.

Each outer pass alternates, warm-started:

  1. statistical equilibrium at the current estimates (route choice p),
  2. the mean sub-problem (nonnegative GLS, covariances fixed),
  3. the covariance sub-problem (proximal gradient, mean fixed),
  4. network loading to refresh the implied observed-link covariance that
     weights the next mean step,
  5. a stopping check: distance between consecutive demand distributions.

Sub-problem solvers run a small fixed number of inner iterations per pass
(default 9) and carry their state across passes. The measurement-error
covariance is reported post hoc as the PSD projection of the gap between the
unbiased sample covariance and the implied one; it is never fed back.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator

from .assignment import (
    DemandDistribution,
    EquilibriumConfig,
    _link_moments,
    solve_statistical_equilibrium,
)
from .covariance import LassoConfig, empirical_cov, solve_sigma_q, wishart_nll
from .distances import gaussian_hellinger, gaussian_kl
from .mean import HistoricalPrior, default_init_q, estimate_q_gls, observed_mean
from .metrics import goodness_of_fit
from .sampling import ObservationSet, SynthesisConfig, synthesize
from .validation import as_vector, ensure_rng, psd_project

hellinger = gaussian_hellinger
kl = gaussian_kl


def stopping_tau(previous, current, metric="kl"):
    """Distance between consecutive demand-distribution estimates; `previous`
    and `current` are (q, sigma_q) pairs or DemandDistribution objects."""
    q1, s1 = _as_pair(previous)
    q2, s2 = _as_pair(current)
    if metric == "kl":
        return gaussian_kl(q2, s2, q1, s1)
    if metric == "hellinger":
        return gaussian_hellinger(q1, s1, q2, s2)
    raise ValueError(f"unknown distance {metric!r}")


def _as_pair(d):
    if isinstance(d, DemandDistribution):
        return d.q, d.sigma_q
    q, s = d
    return np.asarray(q, float), np.asarray(s, float)


def network_loading(route_choice, demand, sigma_e=None, dense_paths=None):
    """Implied flow moments at the current estimates (forward pass only)."""
    return _link_moments(route_choice, demand, sigma_e=sigma_e, dense_paths=dense_paths)


@dataclass
class IGLSConfig:
    equilibrium: EquilibriumConfig = field(default_factory=EquilibriumConfig)
    lasso: LassoConfig = field(default_factory=LassoConfig)
    outer_iters: int = 99
    inner_iters: int = 9
    distance: str = "kl"
    tau_tol: float = 1e-6
    prior: HistoricalPrior | None = None
    init_q: np.ndarray | None = None
    init_sigma_scale: float = 1.0
    init_sigma_seed: int | None = None
    dense_paths: bool | None = None

    def __post_init__(self):
        if self.outer_iters < 0:
            raise ValueError("outer_iters must be >= 0")
        if self.inner_iters < 1:
            raise ValueError("inner_iters must be >= 1")
        if self.distance not in ("kl", "hellinger"):
            raise ValueError(f"unknown distance {self.distance!r}")
        if self.init_sigma_scale <= 0:
            raise ValueError("init_sigma_scale must be > 0")


@dataclass
class IGLSResult:
    demand: DemandDistribution
    route_choice: object
    flows: object
    sigma_e_hat: np.ndarray | None
    tau_trace: np.ndarray
    wishart_trace: np.ndarray
    converged: bool
    n_outer: int
    mean_kkt: float
    mean_unique: bool
    equilibrium_converged: bool
    equilibrium_residual: float
    pass_log: list = field(default_factory=list, repr=False)


def _init_sigma(n_od, cfg):
    if cfg.init_sigma_seed is None:
        return cfg.init_sigma_scale * np.eye(n_od)
    rng = ensure_rng(cfg.init_sigma_seed)
    a = rng.standard_normal((n_od, n_od)) / np.sqrt(n_od)
    return cfg.init_sigma_scale * (a @ a.T + np.eye(n_od))


def run_igls(net, path_set, obs, config=None):
    """Estimate the OD demand mean and covariance from day-to-day observed
    link counts.

    Parameters
    ----------
    net : Network
    path_set : PathSet restricted to the observed links (observe() called)
    obs : ObservationSet aligned with path_set.observed
    config : IGLSConfig

    Returns
    -------
    IGLSResult; converged means the inter-pass distance dropped below
    config.tau_tol before the outer cap. With outer_iters=0 the
    initialization is returned unchanged (loaded through the forward model).
    """
    cfg = config or IGLSConfig()
    if path_set.observed is None:
        raise ValueError("path set has no observed links; call observe() first")
    if obs.counts.shape[1] != len(path_set.observed.indices):
        raise ValueError("observations do not match the observed link set")
    obs_idx = list(path_set.observed.indices)
    n = obs.n_days
    x_hat = observed_mean(obs)
    emp = empirical_cov(obs)

    if cfg.init_q is not None:
        q = as_vector(cfg.init_q, "init_q", size=path_set.n_od, nonnegative=True)
    elif cfg.prior is not None:
        q = cfg.prior.q_h.copy()
    else:
        q = default_init_q(net, path_set, x_hat, cfg.equilibrium.theta)
    sigma_q = _init_sigma(path_set.n_od, cfg)

    sigma_x_obs = None  # identity weight on the first pass
    prev = None
    tau_trace = []
    wishart_trace = []
    pass_log = []
    converged = False
    eq = None
    est = None
    flows = None
    n_outer = 0
    for outer in range(cfg.outer_iters):
        n_outer = outer + 1
        eq = solve_statistical_equilibrium(
            net, path_set, DemandDistribution(q, sigma_q), cfg.equilibrium
        )
        p = eq.route_choice
        est = estimate_q_gls(
            path_set, p, x_hat, sigma_x_obs, n, prior=cfg.prior,
            max_iters=cfg.inner_iters, tol=1e-8, warm_start=q, polish=False,
        )
        q = est.q_hat
        cov = solve_sigma_q(
            emp.s_x, path_set, p, q,
            replace(cfg.lasso, max_iters=cfg.inner_iters),
            warm_start=sigma_q,
        )
        sigma_q = cov.sigma_q_hat
        flows = network_loading(
            p, DemandDistribution(q, sigma_q), dense_paths=cfg.dense_paths
        )
        sigma_x_obs = flows.sigma_x[np.ix_(obs_idx, obs_idx)]
        wishart_trace.append(wishart_nll(sigma_q, emp.s_x, path_set, p, q))
        pass_log.append(
            dict(
                outer=n_outer,
                mean_kkt=est.kkt_residual,
                cov_iters=cov.n_iter,
                equilibrium_residual=eq.residual,
                wishart=wishart_trace[-1],
            )
        )
        if prev is not None:
            tau = stopping_tau(prev, (q, sigma_q), cfg.distance)
            tau_trace.append(tau)
            pass_log[-1]["tau"] = tau
            if tau <= cfg.tau_tol:
                converged = True
                break
        prev = (q.copy(), sigma_q.copy())

    if eq is None:  # outer_iters == 0: report the initialization
        eq = solve_statistical_equilibrium(
            net, path_set, DemandDistribution(q, sigma_q), cfg.equilibrium
        )
        flows = network_loading(
            eq.route_choice, DemandDistribution(q, sigma_q), dense_paths=cfg.dense_paths
        )
        sigma_x_obs = flows.sigma_x[np.ix_(obs_idx, obs_idx)]

    sigma_e_hat = None
    if emp.p_x is not None:
        sigma_e_hat = psd_project(emp.p_x - sigma_x_obs)
    return IGLSResult(
        demand=DemandDistribution(q, psd_project(sigma_q)),
        route_choice=eq.route_choice,
        flows=flows,
        sigma_e_hat=sigma_e_hat,
        tau_trace=np.asarray(tau_trace),
        wishart_trace=np.asarray(wishart_trace),
        converged=converged,
        n_outer=n_outer,
        mean_kkt=est.kkt_residual if est is not None else np.nan,
        mean_unique=est.unique if est is not None else True,
        equilibrium_converged=eq.converged,
        equilibrium_residual=eq.residual,
        pass_log=pass_log,
    )


class IGLSEstimator(BaseEstimator):
    """Demand-distribution estimator over a fixed network and path set.

    fit(X) takes an (n_days, n_observed_links) count matrix in the column
    order of path_set.observed and estimates the OD demand mean and covariance
    (attributes q_, sigma_q_), the route choice and the implied flow moments.
    sample() draws synthetic days from the fitted distribution and score()
    returns the negative KL goodness of fit on held-out day counts, so the
    estimator composes with model-selection utilities.

    Parameters mirror IGLSConfig; network and path_set are required, the path
    set must carry the observed-link restriction.
    """

    def __init__(self, network=None, path_set=None, model="logit", theta=1.0,
                 mc_samples=20000, equilibrium_max_iters=100,
                 equilibrium_tol=1e-3, lam=0.0, algorithm="fista",
                 outer_iters=99, inner_iters=9, distance="kl", tau_tol=1e-6,
                 prior=None, init_sigma_scale=1.0, seed=0):
        self.network = network
        self.path_set = path_set
        self.model = model
        self.theta = theta
        self.mc_samples = mc_samples
        self.equilibrium_max_iters = equilibrium_max_iters
        self.equilibrium_tol = equilibrium_tol
        self.lam = lam
        self.algorithm = algorithm
        self.outer_iters = outer_iters
        self.inner_iters = inner_iters
        self.distance = distance
        self.tau_tol = tau_tol
        self.prior = prior
        self.init_sigma_scale = init_sigma_scale
        self.seed = seed

    def _config(self):
        return IGLSConfig(
            equilibrium=EquilibriumConfig(
                model=self.model, theta=self.theta, mc_samples=self.mc_samples,
                seed=self.seed, max_iters=self.equilibrium_max_iters,
                tol=self.equilibrium_tol,
            ),
            lasso=LassoConfig(lam=self.lam, algorithm=self.algorithm),
            outer_iters=self.outer_iters, inner_iters=self.inner_iters,
            distance=self.distance, tau_tol=self.tau_tol, prior=self.prior,
            init_sigma_scale=self.init_sigma_scale,
        )

    def _observations(self, X):
        if self.network is None or self.path_set is None:
            raise ValueError("network and path_set are required")
        if self.path_set.observed is None:
            raise ValueError("path_set must be restricted to observed links")
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            raise ValueError("X must be 2-d (days x observed links)")
        idx = self.path_set.observed.indices
        if X.shape[1] != len(idx):
            raise ValueError(
                f"X has {X.shape[1]} columns, expected {len(idx)} observed links"
            )
        link_ids = tuple(self.network.links[i].id for i in idx)
        return ObservationSet(counts=X, observed=self.path_set.observed,
                              link_ids=link_ids)

    def fit(self, X, y=None):
        obs = self._observations(X)
        res = run_igls(self.network, self.path_set, obs, self._config())
        self.result_ = res
        self.q_ = res.demand.q
        self.sigma_q_ = res.demand.sigma_q
        self.route_choice_ = res.route_choice
        self.flows_ = res.flows
        self.sigma_e_ = res.sigma_e_hat
        self.tau_trace_ = res.tau_trace
        self.converged_ = res.converged
        self.n_outer_ = res.n_outer
        return self

    def sample(self, n_days, seed=0):
        """Synthetic observed-link counts from the fitted distribution."""
        self._check_fitted()
        cfg = SynthesisConfig(n_days=n_days, seed=seed)
        obs = synthesize(
            self.network, self.path_set,
            DemandDistribution(self.q_, self.sigma_q_),
            self.route_choice_, cfg,
        )
        return obs.counts

    def score(self, X, y=None):
        """Negative KL goodness of fit of the fitted observed-link moments
        against the sample moments of X (higher is better)."""
        self._check_fitted()
        obs = self._observations(X)
        idx = list(self.path_set.observed.indices)
        x_fit = self.flows_.x[idx]
        sigma_fit = self.flows_.sigma_x[np.ix_(idx, idx)]
        return -goodness_of_fit(x_fit, sigma_fit, obs, metric="kl")

    def _check_fitted(self):
        if not hasattr(self, "q_"):
            raise ValueError("estimator is not fitted")
