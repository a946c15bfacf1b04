"""Synthesize day-to-day link count observations from a demand distribution
and a fixed route choice: Gaussian daily demand (rounded, truncated at zero),
multinomial path assignment per OD, optional multiplicative count perturbation,
restriction to the observed links."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .network import ObservedLinks
from .validation import as_vector, ensure_rng, mvn_factor, sample_mvn


@dataclass
class SynthesisConfig:
    n_days: int = 500
    epsilon: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_days < 1:
            raise ValueError("n_days must be >= 1")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError("epsilon must be in [0, 1)")


@dataclass
class ObservationSet:
    """Day-by-link count matrix restricted to the observed links."""

    counts: np.ndarray
    observed: ObservedLinks
    link_ids: tuple

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=float)
        if self.counts.ndim != 2:
            raise ValueError("counts must be 2-d (days x observed links)")
        if self.counts.shape[1] != len(self.observed.indices):
            raise ValueError("counts width does not match observed links")
        if np.any(self.counts < 0) or not np.all(np.isfinite(self.counts)):
            raise ValueError("counts must be finite and nonnegative")

    @property
    def n_days(self):
        return self.counts.shape[0]


def sample_demand(demand, n, seed, factor=None):
    """n daily demand vectors: MVN(q, sigma_q) rounded to integers, clipped at
    zero. Rounding and truncation are deliberate (counts are integers); the
    moment formulas ignore both, which is negligible at realistic demand."""
    rng = ensure_rng(seed)
    draws = sample_mvn(demand.q, demand.sigma_q, n, rng, factor=factor)
    return np.clip(np.rint(draws), 0.0, None).astype(np.int64)


def sample_day(q_realized, route_choice, seed):
    """One day's path flows: per-OD multinomial over the route probabilities.
    Returns (f, x) with x the full link count vector."""
    ps = route_choice.path_set
    q_realized = np.asarray(q_realized)
    if q_realized.shape != (ps.n_od,):
        raise ValueError("q_realized must have one entry per OD pair")
    if np.any(q_realized < 0):
        raise ValueError("q_realized must be nonnegative")
    rng = ensure_rng(seed)
    f = np.empty(ps.n_paths)
    for oi in range(ps.n_od):
        sl = ps.od_slices[oi]
        f[sl] = rng.multinomial(int(q_realized[oi]), route_choice.per_od(oi))
    x = ps.delta @ f
    return f, x


def perturb(x, epsilon, seed):
    """Multiplicative day-to-day disturbance x * max(0, 1 + u*epsilon) with
    u ~ U[-1, 1] per entry; epsilon = 0 returns x unchanged."""
    x = as_vector(x, "x", nonnegative=True)
    if epsilon == 0.0:
        return x.copy()
    rng = ensure_rng(seed)
    u = rng.uniform(-1.0, 1.0, size=x.shape)
    return x * np.clip(1.0 + u * epsilon, 0.0, None)


def synthesize(net, path_set, demand, route_choice, config):
    """Generate config.n_days of observed link counts.

    Day d runs on its own substream seeded by (seed, d), so days can be
    generated independently and the output is reproducible either way.
    """
    if path_set.observed is None:
        raise ValueError("path set has no observed links; call observe() first")
    obs_idx = list(path_set.observed.indices)
    rows = np.empty((config.n_days, len(obs_idx)))
    factor = mvn_factor(demand.sigma_q)  # shared across days
    for day in range(config.n_days):
        rng = np.random.default_rng([config.seed, day])
        q_day = sample_demand(demand, 1, rng, factor=factor)[0]
        _, x = sample_day(q_day, route_choice, rng)
        x = perturb(x, config.epsilon, rng)
        rows[day] = x[obs_idx]
    link_ids = tuple(net.links[i].id for i in obs_idx)
    return ObservationSet(counts=rows, observed=path_set.observed, link_ids=link_ids)


def write_observations_csv(obs, path):
    """CSV with header day,link_<id>,... and one row per day (12 significant
    digits, enough to round-trip the perturbed counts)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["day"] + [f"link_{lid}" for lid in obs.link_ids])
        for d in range(obs.n_days):
            w.writerow([d] + [f"{v:.12g}" for v in obs.counts[d]])


def read_observations_csv(path, net):
    """Read an observations CSV back against a network; the link_<id> columns
    must name links of net."""
    try:
        fh = open(path, newline="")
    except OSError as e:
        raise ValueError(f"cannot read {path}: {e}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "day" or len(header) < 2:
            raise ValueError(f"{path}: expected header day,link_<id>,...")
        ids = []
        for col in header[1:]:
            if not col.startswith("link_"):
                raise ValueError(f"{path}: bad column {col!r}, expected link_<id>")
            lid = col[len("link_"):]
            if lid not in net.link_index:
                raise ValueError(f"{path}: unknown link_id {lid!r}")
            ids.append(lid)
        rows = []
        for i, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}:{i}: expected {len(header)} columns, got {len(row)}")
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError:
                raise ValueError(f"{path}:{i}: non-numeric count") from None
    idx = [net.link_index[lid] for lid in ids]
    order = np.argsort(idx)
    counts = np.asarray(rows, dtype=float)[:, order]
    observed = ObservedLinks(tuple(sorted(idx)))
    link_ids = tuple(ids[j] for j in order)
    return ObservationSet(counts=counts, observed=observed, link_ids=link_ids)
