"""Command line front end.

Subcommands:
  synthesize   forward-model a ground truth and write day-to-day observations
  estimate     run the IGLS estimation on an observations file
  lasso-path   sweep the covariance penalty over a grid, write the coefficients
  evaluate     compare a result file against a truth file

All commands read one INI-style config (key = value under [section]); paths in
the config resolve relative to the config file. Exit codes: 0 success,
1 usage or config error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import os
import sys

import numpy as np

from .assignment import DemandDistribution, EquilibriumConfig, solve_statistical_equilibrium
from .covariance import LassoConfig, lambda_max, lasso_path
from .igls import IGLSConfig, run_igls
from .mean import HistoricalPrior
from .metrics import goodness_of_fit, kl_od, prmse, variance_decomposition
from .network import ObservedLinks, generate_paths, load_network, load_observed_links
from .sampling import SynthesisConfig, read_observations_csv, synthesize, write_observations_csv
from .validation import NumericalError


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # map argparse usage errors onto exit code 1
        raise UsageError(message)


def _build_parser():
    p = _Parser(prog="odflow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("synthesize", "estimate", "lasso-path", "evaluate"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="INI config file")
        s.add_argument("--out", default=".", help="output directory")
        s.add_argument("--seed", type=int, default=None, help="override config seeds")
        s.add_argument("--distance", choices=["kl", "hellinger"], default=None)
        s.add_argument("--jobs", type=int, default=1,
                       help="parallel workers (independent grid points only)")
    return p


class _Config:
    """configparser wrapper with errors that name the section and key."""

    def __init__(self, path):
        self.base = os.path.dirname(os.path.abspath(path))
        cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except OSError as e:
            raise UsageError(f"cannot read config {path}: {e}") from None
        except configparser.Error as e:
            raise UsageError(f"bad config {path}: {e}") from None
        self.cp = cp

    def has(self, section, key=None):
        if key is None:
            return self.cp.has_section(section)
        return self.cp.has_option(section, key)

    def get(self, section, key, default=None, required=False):
        if not self.cp.has_option(section, key):
            if required:
                raise UsageError(f"config [{section}] {key} is required")
            return default
        return self.cp.get(section, key).strip()

    def get_float(self, section, key, default=None, required=False):
        raw = self.get(section, key, None, required)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError:
            raise UsageError(f"config [{section}] {key}: not a number: {raw!r}") from None

    def get_int(self, section, key, default=None, required=False):
        raw = self.get(section, key, None, required)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError:
            raise UsageError(f"config [{section}] {key}: not an integer: {raw!r}") from None

    def get_bool(self, section, key, default=None):
        raw = self.get(section, key, None)
        if raw is None:
            return default
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"config [{section}] {key}: not a boolean: {raw!r}")

    def get_floats(self, section, key, required=False):
        raw = self.get(section, key, None, required)
        if raw is None:
            return None
        try:
            return np.array([float(v) for v in raw.split(",")])
        except ValueError:
            raise UsageError(f"config [{section}] {key}: not a number list: {raw!r}") from None

    def path(self, section, key, default=None, required=False):
        raw = self.get(section, key, default, required)
        if raw is None:
            return None
        return raw if os.path.isabs(raw) else os.path.join(self.base, raw)


def _load_problem(cfg):
    links = cfg.path("network", "links", required=True)
    ods = cfg.path("network", "od_pairs", required=True)
    net = load_network(links, ods)
    observed_file = cfg.path("network", "observed")
    if observed_file is not None:
        observed = load_observed_links(observed_file, net)
    else:
        observed = ObservedLinks(tuple(range(net.n_links)))
    k = cfg.get_int("network", "paths_k", default=3)
    ps = generate_paths(net, k, observed=observed)
    return net, ps, observed


def _demand_truth(cfg, n_od):
    mean = cfg.get_floats("demand", "mean", required=True)
    if mean.shape[0] != n_od:
        raise UsageError(f"config [demand] mean: expected {n_od} entries")
    cov_file = cfg.path("demand", "covariance")
    if cov_file is not None:
        try:
            sigma = np.loadtxt(cov_file, delimiter=",", ndmin=2)
        except (OSError, ValueError) as e:
            raise UsageError(f"config [demand] covariance: {e}") from None
    else:
        var = cfg.get_floats("demand", "variance", required=True)
        if var.shape[0] != n_od:
            raise UsageError(f"config [demand] variance: expected {n_od} entries")
        rho = cfg.get_float("demand", "correlation", default=0.0)
        if not -1.0 < rho < 1.0:
            raise UsageError("config [demand] correlation: must be in (-1, 1)")
        sd = np.sqrt(var)
        sigma = rho * np.outer(sd, sd)
        np.fill_diagonal(sigma, var)
    try:
        return DemandDistribution(mean, sigma)
    except ValueError as e:
        raise UsageError(f"config [demand]: {e}") from None


def _equilibrium_config(cfg, seed_override):
    seed = cfg.get_int("equilibrium", "seed", default=0)
    if seed_override is not None:
        seed = seed_override
    try:
        return EquilibriumConfig(
            model=cfg.get("equilibrium", "model", default="logit"),
            theta=cfg.get_float("equilibrium", "theta", default=1.0),
            mc_samples=cfg.get_int("equilibrium", "mc_samples", default=20000),
            seed=seed,
            max_iters=cfg.get_int("equilibrium", "max_iters", default=100),
            tol=cfg.get_float("equilibrium", "tol", default=1e-3),
        )
    except ValueError as e:
        raise UsageError(f"config [equilibrium]: {e}") from None


def _prior(cfg, n_od):
    mean = cfg.get_floats("estimate", "prior_mean")
    if mean is None:
        return None
    if mean.shape[0] != n_od:
        raise UsageError(f"config [estimate] prior_mean: expected {n_od} entries")
    var = cfg.get_floats("estimate", "prior_variance")
    try:
        return HistoricalPrior(mean, var)
    except ValueError as e:
        raise UsageError(f"config [estimate]: {e}") from None


def _igls_config(cfg, n_od, seed_override, distance_override):
    distance = distance_override or cfg.get("estimate", "distance", default="kl")
    try:
        lasso = LassoConfig(
            lam=cfg.get_float("estimate", "lambda", default=0.0),
            algorithm=cfg.get("estimate", "algorithm", default="fista"),
        )
        return IGLSConfig(
            equilibrium=_equilibrium_config(cfg, seed_override),
            lasso=lasso,
            outer_iters=cfg.get_int("estimate", "outer_iters", default=99),
            inner_iters=cfg.get_int("estimate", "inner_iters", default=9),
            distance=distance,
            tau_tol=cfg.get_float("estimate", "tau_tol", default=1e-6),
            prior=_prior(cfg, n_od),
            init_sigma_scale=cfg.get_float("estimate", "init_sigma_scale", default=1.0),
        )
    except ValueError as e:
        if isinstance(e, UsageError):
            raise
        raise UsageError(f"config [estimate]: {e}") from None


def _matrix_json(m):
    m = np.asarray(m, dtype=float)
    return {"rows": int(m.shape[0]), "cols": int(m.shape[1]),
            "data": [float(v) for v in m.ravel(order="C")]}


def _matrix_from_json(obj, what):
    try:
        m = np.asarray(obj["data"], dtype=float).reshape(obj["rows"], obj["cols"])
    except (KeyError, TypeError, ValueError) as e:
        raise UsageError(f"{what}: bad matrix object ({e})") from None
    return m


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")


def _cmd_synthesize(args, cfg):
    net, ps, observed = _load_problem(cfg)
    truth = _demand_truth(cfg, net.n_od)
    eq_cfg = _equilibrium_config(cfg, args.seed)
    eq = solve_statistical_equilibrium(net, ps, truth, eq_cfg)
    seed = cfg.get_int("synthesize", "seed", default=0)
    if args.seed is not None:
        seed = args.seed
    try:
        syn = SynthesisConfig(
            n_days=cfg.get_int("synthesize", "days", default=500),
            epsilon=cfg.get_float("synthesize", "epsilon", default=0.0),
            seed=seed,
        )
    except ValueError as e:
        raise UsageError(f"config [synthesize]: {e}") from None
    obs = synthesize(net, ps, truth, eq.route_choice, syn)
    os.makedirs(args.out, exist_ok=True)
    obs_path = os.path.join(args.out, cfg.get("synthesize", "out", default="observations.csv"))
    write_observations_csv(obs, obs_path)
    truth_obj = {
        "q": [float(v) for v in truth.q],
        "sigma_q": _matrix_json(truth.sigma_q),
        "od_pairs": [[r, s] for r, s in net.od_pairs],
        "route_choice": [float(v) for v in eq.route_choice.flat],
        "paths": [[net.links[a].id for a in p] for p in ps.paths],
        "observed_links": [net.links[i].id for i in observed.indices],
        "equilibrium": {
            "model": eq_cfg.model,
            "converged": bool(eq.converged),
            "residual": float(eq.residual),
        },
        "days": obs.n_days,
        "epsilon": syn.epsilon,
        "seed": syn.seed,
    }
    _write_json(os.path.join(args.out, "truth.json"), truth_obj)
    print(f"wrote {obs.n_days} days x {obs.counts.shape[1]} links to {obs_path}")
    return 0


def _run_estimation(args, cfg):
    net, ps, observed = _load_problem(cfg)
    obs_path = cfg.path("estimate", "observations", required=True)
    obs = read_observations_csv(obs_path, net)
    if obs.observed.indices != observed.indices:
        raise UsageError(
            "observations file columns do not match the configured observed links"
        )
    igls_cfg = _igls_config(cfg, net.n_od, args.seed, args.distance)
    res = run_igls(net, ps, obs, igls_cfg)
    return net, ps, obs, igls_cfg, res


def _cmd_estimate(args, cfg):
    net, ps, obs, igls_cfg, res = _run_estimation(args, cfg)
    os.makedirs(args.out, exist_ok=True)
    obs_idx = list(ps.observed.indices)
    x_fit = res.flows.x[obs_idx]
    sigma_fit = res.flows.sigma_x[np.ix_(obs_idx, obs_idx)]
    gof = {
        "kl": goodness_of_fit(x_fit, sigma_fit, obs, metric="kl"),
        "hellinger": goodness_of_fit(x_fit, sigma_fit, obs, metric="hellinger"),
    }
    # sigma_e_hat lives on the observed links; unobserved links carry no
    # measurement, so their error variance is zero in the decomposition
    sigma_e_full = None
    if res.sigma_e_hat is not None:
        sigma_e_full = np.zeros((net.n_links, net.n_links))
        sigma_e_full[np.ix_(obs_idx, obs_idx)] = res.sigma_e_hat
    decomp = variance_decomposition(res.route_choice, res.demand, sigma_e_full)
    out = {
        "q_hat": [float(v) for v in res.demand.q],
        "sigma_q_hat": _matrix_json(res.demand.sigma_q),
        "od_pairs": [[r, s] for r, s in net.od_pairs],
        "route_choice": [float(v) for v in res.route_choice.flat],
        "paths": [[net.links[a].id for a in p] for p in ps.paths],
        "observed_links": [net.links[i].id for i in obs_idx],
        "x_fit": [float(v) for v in x_fit],
        "converged": bool(res.converged),
        "n_outer": int(res.n_outer),
        "distance": igls_cfg.distance,
        "tau_trace": [float(v) for v in res.tau_trace],
        "wishart_trace": [float(v) for v in res.wishart_trace],
        "mean_kkt": float(res.mean_kkt),
        "mean_unique": bool(res.mean_unique),
        "equilibrium_residual": float(res.equilibrium_residual),
        "equilibrium_converged": bool(res.equilibrium_converged),
        "goodness_of_fit": gof,
        "variance_decomposition": {
            "aggregate": [float(v) for v in decomp.aggregate],
            "demand_share": [float(v) for v in decomp.demand_share],
            "route_share": [float(v) for v in decomp.route_share],
            "error_share": [float(v) for v in decomp.error_share],
        },
    }
    if res.sigma_e_hat is not None and res.sigma_e_hat.shape[0] <= 500:
        out["sigma_e_hat"] = _matrix_json(res.sigma_e_hat)
    if sigma_fit.shape[0] <= 500:
        out["sigma_x_fit"] = _matrix_json(sigma_fit)
    _write_json(os.path.join(args.out, "result.json"), out)
    with open(os.path.join(args.out, "convergence.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["outer", "tau", "wishart_nll", "mean_kkt",
                    "cov_iters", "equilibrium_residual"])
        for row in res.pass_log:
            w.writerow([
                row["outer"],
                f"{row.get('tau', float('nan')):.12g}",
                f"{row['wishart']:.12g}",
                f"{row['mean_kkt']:.12g}",
                row["cov_iters"],
                f"{row['equilibrium_residual']:.12g}",
            ])
    print(
        f"estimate: {res.n_outer} outer passes, "
        f"converged={res.converged}, q_hat={np.array2string(res.demand.q, precision=2)}"
    )
    return 0


def _cmd_lasso_path(args, cfg):
    net, ps, obs, igls_cfg, res = _run_estimation(args, cfg)
    from .covariance import empirical_cov

    emp = empirical_cov(obs)
    q_hat = res.demand.q
    p_hat = res.route_choice
    grid = cfg.get_floats("lasso", "grid")
    if grid is None:
        points = cfg.get_int("lasso", "grid_points", default=20)
        lmax = lambda_max(emp.s_x, ps, p_hat, q_hat)
        lo = cfg.get_float("lasso", "grid_min", default=max(1e-3 * lmax, 1e-8))
        hi = cfg.get_float("lasso", "grid_max", default=2.0 * lmax)
        if lo <= 0 or hi <= lo:
            raise UsageError("config [lasso]: need 0 < grid_min < grid_max")
        grid = np.geomspace(lo, hi, points)
    warm = cfg.get_bool("lasso", "warm_start", default=True)
    ests = lasso_path(
        emp.s_x, ps, p_hat, q_hat, list(grid),
        config=igls_cfg.lasso, warm_start=warm, jobs=max(1, args.jobs),
    )
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "lasso_path.csv")
    n_od = net.n_od
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "entry_row", "entry_col", "value"])
        for g, est in zip(grid, ests):
            s = est.sigma_q_hat
            for i in range(n_od):
                for j in range(i, n_od):
                    w.writerow([f"{g:.12g}", i, j, f"{s[i, j]:.12g}"])
    print(f"wrote {len(list(grid))} grid points to {out_path}")
    return 0


def _cmd_evaluate(args, cfg):
    result_path = cfg.path("evaluate", "result", required=True)
    truth_path = cfg.path("evaluate", "truth", required=True)
    try:
        with open(result_path) as fh:
            result = json.load(fh)
        with open(truth_path) as fh:
            truth = json.load(fh)
    except OSError as e:
        raise UsageError(f"cannot read input: {e}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"bad JSON input: {e}") from None
    try:
        q_hat = np.asarray(result["q_hat"], dtype=float)
        q_true = np.asarray(truth["q"], dtype=float)
    except KeyError as e:
        raise UsageError(f"missing key in inputs: {e}") from None
    sigma_hat = _matrix_from_json(result["sigma_q_hat"], "result sigma_q_hat")
    sigma_true = _matrix_from_json(truth["sigma_q"], "truth sigma_q")
    metrics = {
        "prmse": prmse(q_hat, q_true),
        "kl_od": kl_od(
            DemandDistribution(q_hat, sigma_hat),
            DemandDistribution(q_true, sigma_true),
        ),
    }
    if "goodness_of_fit" in result:
        metrics["goodness_of_fit"] = result["goodness_of_fit"]
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "metrics.json"), metrics)
    print(f"prmse: {metrics['prmse']:.6g}%")
    print(f"kl_od: {metrics['kl_od']:.6g}")
    return 0


def main(argv=None):
    try:
        args = _build_parser().parse_args(argv)
        cfg = _Config(args.config)
        if args.command == "synthesize":
            return _cmd_synthesize(args, cfg)
        if args.command == "estimate":
            return _cmd_estimate(args, cfg)
        if args.command == "lasso-path":
            return _cmd_lasso_path(args, cfg)
        return _cmd_evaluate(args, cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    # LinAlgError subclasses ValueError, so the numerical clause goes first
    except (NumericalError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
