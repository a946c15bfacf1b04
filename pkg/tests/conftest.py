"""Shared fixtures: the two analytic instances used across the suite.

parallel_pair: one OD, two identical parallel links, 50/50 route split.
Every moment is computable by hand (q=100, Var(Q)=300 gives f=(50,50),
Var(X1) = 25 + 0.25*300 = 100).

triangle: two ODs over three links with a shared congested link, BPR costs,
probit ground truth. Small enough to probe the full inverse pipeline.
"""

from types import SimpleNamespace

import numpy as np
import pytest

from odflow import (
    DemandDistribution,
    EquilibriumConfig,
    Link,
    Network,
    ObservedLinks,
    RouteChoice,
    generate_paths,
    solve_statistical_equilibrium,
)


@pytest.fixture(scope="session")
def parallel_pair():
    links = [
        Link(1, "a", "b", 10.0, 360.0),
        Link(2, "a", "b", 10.0, 360.0),
    ]
    net = Network(links=links, od_pairs=(("a", "b"),))
    obs = ObservedLinks(indices=(0, 1))
    ps = generate_paths(net, k=2, observed=obs)
    rc = RouteChoice(ps, np.array([0.5, 0.5]))
    demand = DemandDistribution(q=np.array([100.0]), sigma_q=np.array([[300.0]]))
    return SimpleNamespace(net=net, path_set=ps, obs=obs, rc=rc, demand=demand)


@pytest.fixture(scope="session")
def triangle():
    links = [
        Link(1, 1, 3, 10.0, 360.0),
        Link(2, 1, 2, 10.0, 360.0),
        Link(3, 2, 3, 5.0, 360.0),
    ]
    net = Network(links=links, od_pairs=((1, 3), (2, 3)))
    obs = ObservedLinks(indices=(0, 2))
    ps = generate_paths(net, k=2, observed=obs)
    return SimpleNamespace(net=net, path_set=ps, obs=obs)


def triangle_demand(rho=0.5):
    c = rho * np.sqrt(175.0 * 125.0)
    return DemandDistribution(
        q=np.array([700.0, 500.0]),
        sigma_q=np.array([[175.0, c], [c, 125.0]]),
    )


@pytest.fixture(scope="session")
def triangle_truth(triangle):
    """Probit ground-truth equilibrium for rho = 0.5, reused by slow tests."""
    demand = triangle_demand(0.5)
    cfg = EquilibriumConfig(model="probit", mc_samples=20000, seed=3,
                            max_iters=100, tol=1e-3)
    eq = solve_statistical_equilibrium(triangle.net, triangle.path_set, demand, cfg)
    return SimpleNamespace(demand=demand, cfg=cfg, eq=eq,
                           route_choice=eq.route_choice)
