"""Probabilistic origin-destination demand estimation from day-to-day traffic
counts: a forward model propagating demand uncertainty through route choice
onto link flows, a day-sampling synthesizer, and an iterative GLS inverse
estimator with sparse covariance regularization."""

from .assignment import (
    CostDistribution,
    DemandDistribution,
    EquilibriumConfig,
    EquilibriumResult,
    FlowDistribution,
    RouteChoice,
    conditional_path_cov,
    link_flow_distribution,
    path_cost_distribution,
    path_flow_distribution,
    route_choice_logit,
    route_choice_probit,
    solve_statistical_equilibrium,
)
from .covariance import (
    CovEstimate,
    EmpiricalCov,
    LassoConfig,
    empirical_cov,
    lambda_max,
    lasso_objective,
    lasso_path,
    smooth_gradient,
    soft_threshold,
    solve_sigma_q,
    wishart_nll,
)
from .distances import gaussian_hellinger, gaussian_kl
from .igls import (
    IGLSConfig,
    IGLSEstimator,
    IGLSResult,
    hellinger,
    kl,
    network_loading,
    run_igls,
    stopping_tau,
)
from .mean import (
    EquilibriumMeanResult,
    HistoricalPrior,
    MeanEstimate,
    estimate_f_equilibrium,
    estimate_f_gls,
    estimate_q_gls,
    estimate_q_pinv,
    estimate_q_simple,
    mean_sampling_cov,
    observed_mean,
)
from .metrics import (
    VarianceDecomposition,
    goodness_of_fit,
    kl_od,
    prmse,
    variance_decomposition,
)
from .network import (
    Link,
    Network,
    ObservedLinks,
    PathSet,
    bpr_cost,
    bpr_cost_derivative,
    build_incidence,
    generate_paths,
    load_network,
    load_observed_links,
)
from .sampling import (
    ObservationSet,
    SynthesisConfig,
    perturb,
    read_observations_csv,
    sample_day,
    sample_demand,
    synthesize,
    write_observations_csv,
)
from .validation import NumericalError

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
