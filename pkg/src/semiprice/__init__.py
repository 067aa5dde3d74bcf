"""Simulation lab for semi-parametric contextual dynamic pricing."""

from .config import RunConfig, build_env, build_policy, load_config, parse_config
from .env import (
    CovariateProcess,
    MarketEnv,
    NoiseModel,
    default_env,
    iid_dependent,
    iid_independent,
    oracle_price,
    trunc_poly_noise,
    uniform_noise,
    var_mixing,
)
from .errors import (
    ConfigError,
    InsufficientDataError,
    InversionError,
    NumericalError,
    SelectionError,
    SemipriceError,
)
from .estimation import (
    build_g_hat,
    build_phi_hat,
    cross_validate_m,
    fit_link,
    fit_theta_ls,
    invert_phi,
    nw_derivative,
    nw_regress,
)
from .harness import SummaryStats, replicate, run_trajectory, slope_fit
from .kernels import KernelSpec, build_box, build_flat_top, build_order_m, check_moments
from .policies import (
    adaptive_policy,
    kl_bandit_policy,
    lipschitz_policy,
    oracle_policy,
    rmlp2_policy,
    semi_param_policy,
)

__version__ = "0.1.0"
