"""Low-rank matrix estimation and imputation for informative missing data.

The package provides the nuclear-norm proximal solvers, a model-based
Monte-Carlo EM estimator that models the missingness mechanism, two
mask-concatenation surrogates, and a seeded simulation harness with a CLI
front end.
"""

__version__ = "0.1.0"

from .linalg import SvdFactors, nuclear_norm, numerical_rank, svd, svd_soft_threshold
from .mask_concat import (
    LinkFunction,
    bernoulli_link,
    build_concat_problem,
    concat_solve,
    expfam_solve,
    gaussian_bernoulli_links,
    gaussian_link,
)
from .mcem import McemConfig, McemState, e_step, m_step_phi, m_step_theta, mcem_fit
from .mechanism import (
    MechanismParams,
    MechanismSpec,
    SirOptions,
    fit_logistic_column,
    logistic_missing_prob,
    probit_missing_prob,
    sample_mask,
    sir_sample,
)
from .simulation import (
    METHODS,
    CampaignResult,
    MethodRecord,
    Scenario,
    add_noise,
    auto_lambda_grid,
    estimate_sigma2,
    fit_single,
    generate_low_rank,
    mean_impute,
    prediction_error,
    run_campaign,
    total_error,
)
from .solvers import (
    GridSearchResult,
    SolveOptions,
    SolveResult,
    fista_solve,
    ista_solve,
    lambda_grid_search,
    penalized_objective,
    weighted_ls_gradient,
)

__all__ = [
    "__version__",
    "SvdFactors", "svd", "nuclear_norm", "svd_soft_threshold", "numerical_rank",
    "SolveOptions", "SolveResult", "GridSearchResult",
    "ista_solve", "fista_solve", "lambda_grid_search",
    "weighted_ls_gradient", "penalized_objective",
    "MechanismParams", "MechanismSpec", "SirOptions",
    "logistic_missing_prob", "probit_missing_prob", "sample_mask",
    "sir_sample", "fit_logistic_column",
    "McemConfig", "McemState", "e_step", "m_step_theta", "m_step_phi", "mcem_fit",
    "LinkFunction", "gaussian_link", "bernoulli_link", "gaussian_bernoulli_links",
    "build_concat_problem", "concat_solve", "expfam_solve",
    "Scenario", "MethodRecord", "CampaignResult", "METHODS",
    "generate_low_rank", "add_noise", "prediction_error", "total_error",
    "mean_impute", "estimate_sigma2", "auto_lambda_grid", "run_campaign", "fit_single",
]
