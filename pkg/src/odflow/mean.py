"""Demand-mean estimation from day-to-day observed link counts.

The maximum-likelihood estimate of the observed link mean is the per-link
sample mean; the OD mean is then recovered by nonnegative generalized least
squares against the model-implied mean Delta_o p~ q, weighted by the inverse
of the current observed-link covariance and optionally anchored by a
historical prior:

    min_{q >= 0}  n (A q - xbar)' W (A q - xbar) + (q - q_h)' V (q - q_h)

solved by projected gradient with backtracking (monotone objective, KKT
stopping rule), plus an exact active-set polish on small instances. Variants:
identity/diagonal weighting, a pseudoinverse closed form, path-flow GLS, and
an alternation with the statistical equilibrium for congested networks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .assignment import DemandDistribution, solve_statistical_equilibrium
from .validation import as_vector, check_psd, spd_jitter

# polish and rank checks materialize dense systems only below this size
_DENSE_LIMIT = 2000


def observed_mean(obs):
    """Per-link sample mean of the observed counts (the MLE of the mean)."""
    if obs.n_days < 1:
        raise ValueError("need at least one day of observations")
    return obs.counts.mean(axis=0)


def mean_sampling_cov(sigma_x_obs, n):
    """Covariance of the sample-mean estimator: Sigma_x^o / n."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return np.asarray(sigma_x_obs, dtype=float) / float(n)


@dataclass
class HistoricalPrior:
    """Historical OD demand with its uncertainty; covariance may be a full
    matrix or a 1-d vector of variances (diagonal). Defaults to identity."""

    q_h: np.ndarray
    sigma_q_h: np.ndarray | None = None

    def __post_init__(self):
        self.q_h = as_vector(self.q_h, "q_h", nonnegative=True)
        if self.sigma_q_h is not None:
            s = np.asarray(self.sigma_q_h, dtype=float)
            if s.ndim == 1:
                if np.any(s <= 0):
                    raise ValueError("prior variances must be > 0")
                if s.shape[0] != self.q_h.shape[0]:
                    raise ValueError("prior variance length mismatch")
            else:
                s = check_psd(s, "sigma_q_h", tol=1e-6)
                if s.shape[0] != self.q_h.shape[0]:
                    raise ValueError("prior covariance dimension mismatch")
            self.sigma_q_h = s

    def precision_apply(self):
        """Return V(v) applying the prior precision (inverse covariance)."""
        d = self.q_h.shape[0]
        if self.sigma_q_h is None:
            return lambda v: v
        if self.sigma_q_h.ndim == 1:
            w = 1.0 / self.sigma_q_h
            return lambda v: w * v
        factor = cho_factor(spd_jitter(self.sigma_q_h))
        return lambda v: cho_solve(factor, v)


@dataclass
class MeanEstimate:
    q_hat: np.ndarray
    x_fit: np.ndarray
    f_hat: np.ndarray | None = None
    objective_trace: np.ndarray = field(default_factory=lambda: np.empty(0))
    kkt_residual: float = np.nan
    n_iter: int = 0
    converged: bool = False
    unique: bool = True


def _weight_apply(sigma_x_obs, m):
    if sigma_x_obs is None:
        return lambda v: v
    sigma_x_obs = np.asarray(sigma_x_obs, dtype=float)
    if sigma_x_obs.ndim == 1:
        if sigma_x_obs.shape[0] != m:
            raise ValueError("weight vector length mismatch")
        w = sigma_x_obs
        return lambda v: w * v  # already a precision, used by simple variant
    if sigma_x_obs.shape != (m, m):
        raise ValueError("sigma_x_obs shape mismatch")
    factor = cho_factor(spd_jitter(0.5 * (sigma_x_obs + sigma_x_obs.T)))
    return lambda v: cho_solve(factor, v)


def _kkt_residual(q, g):
    """Stationarity on the support, dual feasibility on the active set."""
    free = q > 0
    r = 0.0
    if np.any(free):
        r = float(np.max(np.abs(g[free])))
    if np.any(~free):
        r = max(r, float(max(0.0, -np.min(g[~free]))))
    return r


def _power_iteration_l(hess_apply, dim, iters=80):
    rng = np.random.default_rng(12345)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    lam = 1.0
    for _ in range(iters):
        hv = hess_apply(v)
        lam = float(np.linalg.norm(hv))
        if lam <= 0:
            return 1.0
        v = hv / lam
    return max(lam, 1e-12)


def _projected_gradient(objective, gradient, hess_apply, q0, max_iters, tol):
    """Monotone projected gradient onto the nonnegative orthant.

    Backtracks on the quadratic majorization test, which both guarantees a
    nonincreasing objective trace and keeps steps as long as the local
    curvature allows. Stops on the KKT residual.
    """
    q = np.clip(np.asarray(q0, dtype=float), 0.0, None)
    l0 = _power_iteration_l(hess_apply, q.shape[0])
    t0 = 1.0 / l0
    trace = []
    converged = False
    kkt = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        obj = objective(q)
        g = gradient(q)
        trace.append(obj)
        kkt = _kkt_residual(q, g)
        if kkt <= tol:
            converged = True
            break
        t = t0
        for _ in range(60):
            q_new = np.clip(q - t * g, 0.0, None)
            d = q_new - q
            quad = obj + float(g @ d) + float(d @ d) / (2.0 * t)
            if objective(q_new) <= quad + 1e-12 * max(1.0, abs(obj)):
                break
            t *= 0.5
        q = q_new
    return q, np.asarray(trace), kkt, it, converged


def _polish(q, grad_fn, hess_mat, lin, tol):
    """One active-set refinement: solve the unconstrained problem on the
    support and keep it if feasible and KKT-better."""
    free = q > 0
    if not np.any(free):
        return q, False
    h_ff = hess_mat[np.ix_(free, free)]
    try:
        q_f = np.linalg.solve(h_ff, lin[free])
    except np.linalg.LinAlgError:
        return q, False
    if np.any(q_f < 0):
        return q, False
    cand = np.zeros_like(q)
    cand[free] = q_f
    if _kkt_residual(cand, grad_fn(cand)) <= max(tol, _kkt_residual(q, grad_fn(q))):
        return cand, True
    return q, False


def estimate_q_gls(path_set, route_choice, x_hat, sigma_x_obs, n, prior=None,
                   max_iters=2000, tol=1e-8, warm_start=None, polish=True):
    """Nonnegative GLS for the OD demand mean.

    Parameters
    ----------
    path_set : PathSet with delta_obs restricted to the observed links
    route_choice : RouteChoice fixing p~
    x_hat : observed-link sample mean
    sigma_x_obs : observed-link covariance used as GLS weight (inverted with a
        small ridge), or None for the identity weight
    n : number of days behind x_hat (scales the data term); n=0 with a prior
        returns the prior optimum
    prior : HistoricalPrior, optional
    warm_start : initial q, optional; max_iters caps the projected-gradient
        steps (set it low for capped inner solves inside the outer loop)
    polish : attempt the exact active-set refinement after the iteration
        (skipped on large instances)
    """
    a = (path_set.delta_obs @ route_choice.p_tilde).tocsr()
    m, n_od = a.shape
    x_hat = as_vector(x_hat, "x_hat", size=m)
    if n < 0:
        raise ValueError("n must be >= 0")
    if n == 0 and prior is None:
        raise ValueError("n=0 needs a prior to determine the estimate")
    w_apply = _weight_apply(sigma_x_obs, m)
    v_apply = prior.precision_apply() if prior is not None else None
    q_h = prior.q_h if prior is not None else None
    if q_h is not None and q_h.shape[0] != n_od:
        raise ValueError("prior dimension does not match od count")
    n = float(n)

    unique = True
    if prior is None:
        unique = _full_column_rank(a, w_apply, m, n_od)
    ridge = 0.0

    def hess_apply(v):
        hv = n * (a.T @ w_apply(a @ v))
        if v_apply is not None:
            hv = hv + v_apply(v)
        return 2.0 * hv + ridge * v

    if not unique:
        # vanishing ridge tie-break toward the minimum-norm optimum
        ridge = 1e-10 * _power_iteration_l(hess_apply, n_od)

    def objective(q):
        r = a @ q - x_hat
        val = n * float(r @ w_apply(r))
        if v_apply is not None:
            d = q - q_h
            val += float(d @ v_apply(d))
        return val + 0.5 * ridge * float(q @ q)

    def gradient(q):
        g = 2.0 * n * (a.T @ w_apply(a @ q - x_hat))
        if v_apply is not None:
            g = g + 2.0 * v_apply(q - q_h)
        return g + ridge * q

    if warm_start is not None:
        q0 = as_vector(warm_start, "warm_start", size=n_od, nonnegative=True)
    elif q_h is not None:
        q0 = q_h.copy()
    else:
        q0 = np.zeros(n_od)
    q, trace, kkt, n_iter, converged = _projected_gradient(
        objective, gradient, hess_apply, q0, max_iters, tol
    )
    if polish and n_od <= _DENSE_LIMIT and m <= _DENSE_LIMIT:
        ad = a.toarray()
        wa = np.column_stack([w_apply(ad[:, j]) for j in range(n_od)])
        hess = 2.0 * n * (ad.T @ wa)
        lin = 2.0 * n * (ad.T @ w_apply(x_hat))
        if v_apply is not None:
            vm = np.column_stack([v_apply(e) for e in np.eye(n_od)])
            hess = hess + 2.0 * vm
            lin = lin + 2.0 * (vm @ q_h)
        if ridge:
            hess = hess + ridge * np.eye(n_od)
        q2, improved = _polish(q, gradient, hess, lin, tol)
        if improved:
            q = q2
            kkt = _kkt_residual(q, gradient(q))
            converged = converged or kkt <= tol
            trace = np.append(trace, objective(q))
    return MeanEstimate(
        q_hat=q,
        x_fit=a @ q,
        f_hat=route_choice.p_tilde @ q,
        objective_trace=np.asarray(trace),
        kkt_residual=kkt,
        n_iter=n_iter,
        converged=converged,
        unique=unique,
    )


def _full_column_rank(a, w_apply, m, n_cols):
    if n_cols > m:
        return False
    if max(m, n_cols) > _DENSE_LIMIT:
        return True  # undecidable cheaply; callers at scale pass a prior
    ad = a.toarray()
    return np.linalg.matrix_rank(ad) == n_cols


def estimate_q_simple(path_set, route_choice, x_hat, weights=None,
                      max_iters=2000, tol=1e-8, warm_start=None):
    """Weighted least squares ||diag(w) (A q - x_hat)||^2 over q >= 0; w is a
    per-link confidence (zero drops the observation). Identity w equals
    estimate_q_gls with identity covariance and n=1."""
    m = path_set.delta_obs.shape[0]
    if weights is None:
        weights = np.ones(m)
    weights = as_vector(weights, "weights", size=m, nonnegative=True)
    return estimate_q_gls(
        path_set, route_choice, x_hat, weights**2, n=1,
        max_iters=max_iters, tol=tol, warm_start=warm_start,
    )


def estimate_q_pinv(path_set, route_choice, x_hat, sigma_x_obs):
    """Whitened pseudoinverse estimate max(Dtilde^+ v, 0) with
    Dtilde = Sigma^{-1/2} A and v = Sigma^{-1/2} x_hat."""
    a = (path_set.delta_obs @ route_choice.p_tilde).toarray()
    m = a.shape[0]
    x_hat = as_vector(x_hat, "x_hat", size=m)
    sigma = check_psd(np.asarray(sigma_x_obs, dtype=float), "sigma_x_obs", tol=1e-6)
    w, v = np.linalg.eigh(spd_jitter(sigma))
    inv_sqrt = (v / np.sqrt(w)) @ v.T
    d_tilde = inv_sqrt @ a
    q = np.linalg.pinv(d_tilde) @ (inv_sqrt @ x_hat)
    q = np.clip(q, 0.0, None)
    return MeanEstimate(
        q_hat=q, x_fit=a @ q, f_hat=route_choice.p_tilde @ q,
        kkt_residual=np.nan, converged=True,
        unique=np.linalg.matrix_rank(d_tilde) == a.shape[1],
    )


def estimate_f_gls(path_set, x_hat, sigma_x_obs, n, prior,
                   max_iters=2000, tol=1e-8, warm_start=None, polish=True):
    """Path-flow GLS: min_{f >= 0} n (Delta_o f - xbar)' W (Delta_o f - xbar)
    + (M f - q_h)' V (M f - q_h). The OD-level prior is required (path flows
    are never identified from link counts alone); returns q_hat = M f_hat."""
    if prior is None:
        raise ValueError("estimate_f_gls requires a historical prior")
    d_obs = path_set.delta_obs.tocsr()
    m, n_paths = d_obs.shape
    x_hat = as_vector(x_hat, "x_hat", size=m)
    w_apply = _weight_apply(sigma_x_obs, m)
    v_apply = prior.precision_apply()
    q_h = prior.q_h
    mm = path_set.od_incidence.tocsr()
    if q_h.shape[0] != mm.shape[0]:
        raise ValueError("prior dimension does not match od count")
    n = float(n)

    stacked_rank_full = False
    if max(n_paths, m + mm.shape[0]) <= _DENSE_LIMIT:
        stacked = np.vstack([d_obs.toarray(), mm.toarray()])
        stacked_rank_full = np.linalg.matrix_rank(stacked) == n_paths
    unique = stacked_rank_full
    ridge = 0.0

    def hess_apply(v):
        hv = n * (d_obs.T @ w_apply(d_obs @ v)) + mm.T @ v_apply(mm @ v)
        return 2.0 * hv + ridge * v

    if not unique:
        ridge = 1e-10 * _power_iteration_l(hess_apply, n_paths)

    def objective(f):
        r = d_obs @ f - x_hat
        d = mm @ f - q_h
        return (
            n * float(r @ w_apply(r))
            + float(d @ v_apply(d))
            + 0.5 * ridge * float(f @ f)
        )

    def gradient(f):
        return (
            2.0 * n * (d_obs.T @ w_apply(d_obs @ f - x_hat))
            + 2.0 * (mm.T @ v_apply(mm @ f - q_h))
            + ridge * f
        )

    if warm_start is not None:
        f0 = as_vector(warm_start, "warm_start", size=n_paths, nonnegative=True)
    else:
        # spread the prior uniformly over each OD's paths
        f0 = np.empty(n_paths)
        for oi in range(path_set.n_od):
            sl = path_set.od_slices[oi]
            f0[sl] = q_h[oi] / (sl.stop - sl.start)
    f, trace, kkt, n_iter, converged = _projected_gradient(
        objective, gradient, hess_apply, f0, max_iters, tol
    )
    if polish and n_paths <= _DENSE_LIMIT and m + mm.shape[0] <= _DENSE_LIMIT:
        dd = d_obs.toarray()
        md = mm.toarray()
        wd = np.column_stack([w_apply(dd[:, j]) for j in range(n_paths)])
        vmd = np.column_stack([v_apply(md[:, j]) for j in range(n_paths)])
        hess = 2.0 * n * (dd.T @ wd) + 2.0 * (md.T @ vmd)
        if ridge:
            hess = hess + ridge * np.eye(n_paths)
        lin = 2.0 * n * (dd.T @ w_apply(x_hat)) + 2.0 * (md.T @ v_apply(q_h))
        f2, improved = _polish(f, gradient, hess, lin, tol)
        if improved:
            f = f2
            kkt = _kkt_residual(f, gradient(f))
            converged = converged or kkt <= tol
            trace = np.append(trace, objective(f))
    return MeanEstimate(
        q_hat=mm @ f,
        x_fit=d_obs @ f,
        f_hat=f,
        objective_trace=np.asarray(trace),
        kkt_residual=kkt,
        n_iter=n_iter,
        converged=converged,
        unique=unique,
    )


@dataclass
class EquilibriumMeanResult:
    estimate: MeanEstimate
    equilibrium: object
    n_alternations: int
    converged: bool
    change_trace: np.ndarray


def default_init_q(net, path_set, x_hat, theta=1.0):
    """Uniform demand scaled so the free-flow loading matches the observed
    totals; the standard no-prior initialization."""
    from .assignment import route_choice_logit

    p0 = route_choice_logit(path_set, path_set.delta.T @ net.free_flow_costs(), theta)
    a = path_set.delta_obs @ p0.p_tilde
    ones = np.ones(path_set.n_od)
    denom = float(np.sum(a @ ones))
    scale = float(np.sum(x_hat)) / denom if denom > 0 else 1.0
    return np.full(path_set.n_od, max(scale, 0.0))


def estimate_f_equilibrium(net, path_set, x_hat, sigma_x_obs, n, sigma_q,
                           eq_config, prior=None, q0=None, alternations=30,
                           tol=1e-6, gls_max_iters=2000, gls_tol=1e-8,
                           polish=True):
    """Alternate (a) the statistical equilibrium route choice at the current
    demand mean and (b) the nonnegative GLS given that route choice, until the
    relative change ||q+ - q||_inf / (1 + ||q||_inf) drops below tol.

    sigma_q is held fixed (it belongs to the covariance sub-problem).
    """
    if q0 is not None:
        q = as_vector(q0, "q0", size=path_set.n_od, nonnegative=True)
    elif prior is not None:
        q = prior.q_h.copy()
    else:
        q = default_init_q(net, path_set, x_hat, eq_config.theta)
    est = None
    eq = None
    changes = []
    converged = False
    k = 0
    for k in range(1, alternations + 1):
        eq = solve_statistical_equilibrium(
            net, path_set, DemandDistribution(q, sigma_q), eq_config
        )
        est = estimate_q_gls(
            path_set, eq.route_choice, x_hat, sigma_x_obs, n, prior=prior,
            max_iters=gls_max_iters, tol=gls_tol, warm_start=q, polish=polish,
        )
        change = float(np.max(np.abs(est.q_hat - q))) / (1.0 + float(np.max(np.abs(q))))
        changes.append(change)
        q = est.q_hat
        if change <= tol:
            converged = True
            break
    return EquilibriumMeanResult(
        estimate=est,
        equilibrium=eq,
        n_alternations=k,
        converged=converged,
        change_trace=np.asarray(changes),
    )
