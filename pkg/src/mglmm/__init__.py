"""Mixed models for one or several responses, fitted by conditional inference.

The fitting algorithm predicts the cluster-level random components instead
of integrating them out, which makes marginals of different families (for
example a Gaussian and a Poisson response sharing clusters) tractable under
one joint random-component distribution.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DomainError, MglmmError
from .families import (
    FAMILY_NAMES,
    LINK_NAMES,
    get_family,
    get_link,
    link_eval,
    log_density,
    unit_deviance,
    variance_function,
)
from .model import (
    ClusterComponent,
    ClusterStructure,
    Dataset,
    MarginalSpec,
    ModelSpec,
    RandomDist,
    build_design,
    build_matrices,
    validate,
)
from .estimator import (
    FitOptions,
    FitResult,
    fit,
    inference_functions,
    linear_predictor,
    predict_b,
    predict_nested,
    project_zero_mean,
    update_beta_lambda,
)
from .glm import fit_glm
from .variance import (
    estimate_covariance_general,
    estimate_variance_gaussian,
    log_gaussian_integral,
)
from .sandwich import (
    GodambeBlocks,
    check_regularity,
    godambe_blocks,
    godambe_inverse_blocks,
    sigma_b_hat,
    unconditional_av,
)
from .laplace import fit_laplace, glm_weights
from .quadrature import quadrature_mle
from .simulate import SimConfig, simulate_dataset, study_model
from .studies import StudyOutput, run_study

__all__ = [name for name in dir() if not name.startswith("_")]
