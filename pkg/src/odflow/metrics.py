"""Evaluation metrics: demand recovery error, distribution distance to the
truth, observed-moment goodness of fit, and the link-variance decomposition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assignment import conditional_path_cov, _sandwich
from .covariance import empirical_cov
from .distances import gaussian_hellinger, gaussian_kl
from .mean import observed_mean
from .validation import as_vector


def prmse(q_hat, q_true):
    """Root-mean-square error as a percentage of the average true demand:
    100 * sqrt(mean((q_hat - q_true)^2)) / mean(q_true)."""
    q_hat = as_vector(q_hat, "q_hat")
    q_true = as_vector(q_true, "q_true", size=q_hat.shape[0])
    total = float(np.sum(q_true))
    if total <= 0:
        raise ValueError("q_true must have positive total demand")
    rmse = float(np.sqrt(np.mean((q_hat - q_true) ** 2)))
    return 100.0 * rmse * q_true.shape[0] / total


def kl_od(demand_hat, demand_true):
    """KL divergence of the estimated demand distribution from the truth
    (truth is the reference, i.e. the second argument)."""
    return gaussian_kl(demand_hat.q, demand_hat.sigma_q,
                       demand_true.q, demand_true.sigma_q)


def goodness_of_fit(x_fit, sigma_x_fit, obs, metric="kl"):
    """Distance between the model-implied observed-link distribution
    N(x_fit, sigma_x_fit) and the data distribution N(xbar, P_x) with the
    unbiased sample covariance. Needs at least 2 days."""
    emp = empirical_cov(obs)
    if emp.p_x is None:
        raise ValueError("goodness of fit needs at least 2 days")
    xbar = observed_mean(obs)
    if metric == "kl":
        return gaussian_kl(x_fit, sigma_x_fit, xbar, emp.p_x)
    if metric == "hellinger":
        return gaussian_hellinger(x_fit, sigma_x_fit, xbar, emp.p_x)
    raise ValueError(f"unknown distance {metric!r}")


@dataclass
class VarianceDecomposition:
    """Per-link variance split into demand, route choice, and measurement
    error contributions, with the per-link and aggregate shares."""

    demand: np.ndarray
    route: np.ndarray
    error: np.ndarray
    demand_share: np.ndarray
    route_share: np.ndarray
    error_share: np.ndarray
    aggregate: tuple


def variance_decomposition(route_choice, demand, sigma_e=None):
    """Split each link's count variance per the moment structure:
    demand part (Delta p~) Sigma_q (Delta p~)', route part
    Delta S_f|q Delta', error part Sigma_e. Shares sum to 1 on every link
    with positive variance; aggregate shares come from the traces."""
    ps = route_choice.path_set
    delta = ps.delta
    dp = (delta @ route_choice.p_tilde).tocsr()
    demand_var = np.diag(_sandwich(dp, demand.sigma_q)).copy()
    cond = conditional_path_cov(route_choice, demand.q)
    route_var = (delta @ cond @ delta.T).diagonal().copy()
    if sigma_e is None:
        error_var = np.zeros_like(demand_var)
    else:
        sigma_e = np.asarray(sigma_e, dtype=float)
        if sigma_e.shape[0] != delta.shape[0]:
            raise ValueError("sigma_e dimension does not match link count")
        error_var = np.diag(sigma_e).copy()
    total = demand_var + route_var + error_var
    with np.errstate(invalid="ignore", divide="ignore"):
        ds = np.where(total > 0, demand_var / total, 0.0)
        rs = np.where(total > 0, route_var / total, 0.0)
        es = np.where(total > 0, error_var / total, 0.0)
    agg_total = float(np.sum(total))
    if agg_total > 0:
        aggregate = (
            float(np.sum(demand_var)) / agg_total,
            float(np.sum(route_var)) / agg_total,
            float(np.sum(error_var)) / agg_total,
        )
    else:
        aggregate = (0.0, 0.0, 0.0)
    return VarianceDecomposition(
        demand=demand_var, route=route_var, error=error_var,
        demand_share=ds, route_share=rs, error_share=es,
        aggregate=aggregate,
    )
