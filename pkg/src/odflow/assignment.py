"""Forward model: propagate a multivariate OD demand distribution through
probabilistic route choice onto link flows, and solve the statistical
equilibrium fixed point in the route-choice probabilities.

Moment structure, for route-choice probability matrix p~ (path x OD):

    f   = p~ q
    S_f = S_f|q + p~ S_q p~'     with S_f|q block diagonal per OD,
                                 block rs = q_rs (diag(p_rs) - p_rs p_rs')
    x   = Delta f
    S_x = Delta S_f Delta'       (+ S_e on the measured counts)

Path costs are BPR times summed over links; their covariance comes from a
first-order delta method through the link cost function.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .validation import as_vector, check_psd, ensure_rng, sample_mvn

# above this many paths the dense path-flow covariance is not materialized
DENSE_PATH_LIMIT = 4000


def _sandwich(a, s):
    """a @ s @ a.T for sparse a and symmetric dense s, as a dense ndarray."""
    tmp = a @ s  # sparse @ dense -> ndarray
    out = a @ tmp.T  # s symmetric: (a s)' = s a'
    if sp.issparse(out):
        out = out.toarray()
    return np.asarray(0.5 * (out + out.T))


@dataclass
class DemandDistribution:
    """Mean vector and covariance of the OD demand, OD-pair order."""

    q: np.ndarray
    sigma_q: np.ndarray

    def __post_init__(self):
        self.q = as_vector(self.q, "q", nonnegative=True)
        self.sigma_q = check_psd(self.sigma_q, "sigma_q", tol=1e-6)
        if self.sigma_q.shape[0] != self.q.shape[0]:
            raise ValueError("q and sigma_q dimensions differ")

    @property
    def n_od(self):
        return self.q.shape[0]


class RouteChoice:
    """Per-OD route choice probabilities over a PathSet.

    flat     probability per path, OD-major order (sums to 1 within each OD)
    p_tilde  sparse path x OD matrix diag(flat) @ B
    """

    def __init__(self, path_set, flat):
        flat = as_vector(flat, "route choice probabilities")
        if flat.shape[0] != path_set.n_paths:
            raise ValueError("route choice length does not match path set")
        if np.any(flat < -1e-12) or np.any(flat > 1 + 1e-12):
            raise ValueError("route choice probabilities outside [0, 1]")
        flat = np.clip(flat, 0.0, 1.0)
        sums = path_set.od_incidence @ flat
        if np.max(np.abs(sums - 1.0)) > 1e-9:
            raise ValueError("route choice probabilities do not sum to 1 per OD")
        self.path_set = path_set
        self.flat = flat
        self.p_tilde = sp.csr_matrix(
            (flat, (np.arange(flat.shape[0]), path_set.od_of_path)),
            shape=(path_set.n_paths, path_set.n_od),
        )

    def per_od(self, od):
        return self.flat[self.path_set.od_slices[od]]


@dataclass
class FlowDistribution:
    """First two moments of path and link flows; sigma_f may be omitted on
    large path sets (sigma_x never needs it, see conditional_path_cov)."""

    f: np.ndarray
    x: np.ndarray
    sigma_x: np.ndarray
    sigma_f: np.ndarray | None = None
    sigma_f_given_q: sp.spmatrix | None = field(default=None, repr=False)
    sigma_e: np.ndarray | None = None

    @property
    def sigma_x_measured(self):
        if self.sigma_e is None:
            return self.sigma_x
        return self.sigma_x + self.sigma_e


@dataclass
class CostDistribution:
    """Mean and covariance of path costs (covariance None if not requested)."""

    c: np.ndarray
    sigma_c: np.ndarray | None = None


@dataclass
class EquilibriumConfig:
    model: str = "logit"
    theta: float = 1.0
    mc_samples: int = 20000
    seed: int = 0
    max_iters: int = 100
    tol: float = 1e-3

    def __post_init__(self):
        if self.model not in ("logit", "probit"):
            raise ValueError(f"unknown route choice model {self.model!r}")
        if self.theta <= 0:
            raise ValueError("theta must be > 0")
        if self.mc_samples < 1 or self.max_iters < 1:
            raise ValueError("mc_samples and max_iters must be >= 1")


@dataclass
class EquilibriumResult:
    route_choice: RouteChoice
    flows: FlowDistribution
    costs: CostDistribution
    converged: bool
    residual: float
    residual_trace: np.ndarray
    n_iter: int


def conditional_path_cov(route_choice, q):
    """Multinomial path-flow covariance given the demand realization means:
    block diagonal over ODs, block rs = q_rs (diag(p_rs) - p_rs p_rs')."""
    ps = route_choice.path_set
    q = as_vector(q, "q", size=ps.n_od, nonnegative=True)
    blocks = []
    for oi in range(ps.n_od):
        p = route_choice.per_od(oi)
        blocks.append(q[oi] * (np.diag(p) - np.outer(p, p)))
    return sp.block_diag(blocks, format="csr")


def path_flow_distribution(route_choice, demand, dense=True):
    """Path-flow mean and covariance: f = p~ q, S_f = S_f|q + p~ S_q p~'."""
    ps = route_choice.path_set
    if demand.n_od != ps.n_od:
        raise ValueError("demand dimension does not match path set")
    pt = route_choice.p_tilde
    f = pt @ demand.q
    cond = conditional_path_cov(route_choice, demand.q)
    sigma_f = None
    if dense:
        sigma_f = cond.toarray() + _sandwich(pt, demand.sigma_q)
        sigma_f = 0.5 * (sigma_f + sigma_f.T)
    return f, sigma_f, cond


def link_flow_distribution(path_set, f, sigma_f, sigma_e=None):
    """Project path-flow moments onto links: x = Delta f, S_x = Delta S_f Delta'."""
    delta = path_set.delta
    x = delta @ f
    if sp.issparse(sigma_f):
        sigma_x = (delta @ sigma_f @ delta.T).toarray()
        sigma_x = 0.5 * (sigma_x + sigma_x.T)
    else:
        sigma_x = _sandwich(delta, np.asarray(sigma_f))
    if sigma_e is not None:
        sigma_e = check_psd(sigma_e, "sigma_e", tol=1e-6)
        if sigma_e.shape[0] != x.shape[0]:
            raise ValueError("sigma_e dimension does not match link count")
    return x, sigma_x, sigma_e


def _link_moments(route_choice, demand, sigma_e=None, dense_paths=None):
    """Full forward pass; avoids the dense path covariance unless asked for."""
    ps = route_choice.path_set
    if dense_paths is None:
        dense_paths = ps.n_paths <= DENSE_PATH_LIMIT
    f, sigma_f, cond = path_flow_distribution(route_choice, demand, dense=dense_paths)
    delta = ps.delta
    dp = (delta @ route_choice.p_tilde).tocsr()  # |A| x |K_q|
    sigma_x = (delta @ cond @ delta.T).toarray()
    sigma_x += _sandwich(dp, demand.sigma_q)
    sigma_x = 0.5 * (sigma_x + sigma_x.T)
    x = delta @ f
    return FlowDistribution(
        f=f, x=x, sigma_x=sigma_x, sigma_f=sigma_f,
        sigma_f_given_q=cond, sigma_e=sigma_e,
    )


def path_cost_distribution(net, path_set, x, sigma_x, need_cov=True):
    """Path cost moments under BPR link costs.

    Mean: c = Delta' t(x). Covariance: first-order delta method through the
    link cost map, S_c = Delta' J S_x J Delta with J = diag(t'(x)).
    """
    x = as_vector(x, "x", size=net.n_links, nonnegative=True)
    t = net.link_costs(x)
    c = path_set.delta.T @ t
    sigma_c = None
    if need_cov:
        j = net.link_cost_derivatives(x)
        jsj = (j[:, None] * sigma_x) * j[None, :]
        sigma_c = _sandwich(path_set.delta.T.tocsr(), jsj)
    return CostDistribution(c=c, sigma_c=sigma_c)


def route_choice_logit(path_set, c, theta=1.0):
    """Multinomial logit on mean path costs, p ~ exp(-theta c) within each OD.
    Stabilized by subtracting the per-OD minimum cost."""
    c = as_vector(c, "c", size=path_set.n_paths)
    if theta <= 0:
        raise ValueError("theta must be > 0")
    flat = np.empty_like(c)
    for oi in range(path_set.n_od):
        sl = path_set.od_slices[oi]
        u = -theta * c[sl]
        u -= u.max()
        e = np.exp(u)
        flat[sl] = e / e.sum()
    return RouteChoice(path_set, flat)


def route_choice_probit(path_set, cost_dist, mc_samples=20000, seed=0):
    """Probability that each path is cheapest under the Gaussian cost
    distribution, estimated per OD by common-random-number Monte Carlo:
    draw mc_samples cost vectors from the OD block of N(c, S_c), count argmins
    and normalize the counts. Deterministic for a given seed."""
    if cost_dist.sigma_c is None:
        raise ValueError("probit route choice needs the path cost covariance")
    rng = ensure_rng(seed)
    c = cost_dist.c
    flat = np.empty(path_set.n_paths)
    for oi in range(path_set.n_od):
        sl = path_set.od_slices[oi]
        k = sl.stop - sl.start
        if k == 1:
            flat[sl] = 1.0
            continue
        block = cost_dist.sigma_c[sl, sl]
        draws = sample_mvn(c[sl], block, mc_samples, rng)
        counts = np.bincount(np.argmin(draws, axis=1), minlength=k).astype(float)
        flat[sl] = counts / counts.sum()
    return RouteChoice(path_set, flat)


def _psi(net, ps, demand, p, cfg):
    """One evaluation of the equilibrium map: flows and costs at p, then the
    route-choice response to those costs.

    Logit reacts to mean costs only, so the flow covariance (the expensive
    part at scale) is skipped for it entirely.
    """
    if cfg.model == "logit":
        x = ps.delta @ (p.p_tilde @ demand.q)
        costs = path_cost_distribution(net, ps, x, None, need_cov=False)
        return route_choice_logit(ps, costs.c, cfg.theta)
    flows = _link_moments(p, demand, dense_paths=False)
    costs = path_cost_distribution(net, ps, flows.x, flows.sigma_x, need_cov=True)
    # fixed per-call seed: common random numbers across iterations keep
    # the map deterministic so the fixed point is well defined
    return route_choice_probit(ps, costs, cfg.mc_samples, cfg.seed)


def solve_statistical_equilibrium(net, path_set, demand, config=None):
    """Solve the fixed point p = psi(p) of the route-choice map by damped
    iteration (method of successive averages).

    Each iteration evaluates psi at the current p (forward moments, costs,
    route-choice response) and moves p toward it with step 1/(iter+1); the
    residual is ||psi(p) - p||_inf before the move. Non-convergence within
    max_iters is reported through the result flags, not raised.

    Returns
    -------
    EquilibriumResult with the final route choice, the flow and cost
    distributions evaluated at it, the residual trace, and convergence flags.
    """
    cfg = config or EquilibriumConfig()
    if demand.n_od != path_set.n_od:
        raise ValueError("demand dimension does not match path set")
    # uniform start within each OD
    flat = np.empty(path_set.n_paths)
    for oi in range(path_set.n_od):
        sl = path_set.od_slices[oi]
        flat[sl] = 1.0 / (sl.stop - sl.start)
    p = RouteChoice(path_set, flat)
    trace = []
    converged = False
    n_iter = 0
    for nu in range(cfg.max_iters):
        nxt = _psi(net, path_set, demand, p, cfg)
        residual = float(np.max(np.abs(nxt.flat - p.flat)))
        trace.append(residual)
        n_iter = nu + 1
        if residual <= cfg.tol:
            converged = True
            break
        step = 1.0 / (nu + 1.0)
        mixed = p.flat + step * (nxt.flat - p.flat)
        p = RouteChoice(path_set, mixed)
    flows = _link_moments(p, demand)
    costs = path_cost_distribution(
        net, path_set, flows.x, flows.sigma_x, need_cov=(cfg.model == "probit")
    )
    return EquilibriumResult(
        route_choice=p,
        flows=flows,
        costs=costs,
        converged=converged,
        residual=trace[-1] if trace else 0.0,
        residual_trace=np.asarray(trace),
        n_iter=n_iter,
    )
