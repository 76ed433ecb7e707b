"""Robust differential testing for clustered (multi-subject, multi-cell) data.

Stage 1 summarizes every case/control subject pair by a rank-based
difference such as the probabilistic index; stage 2 fits a latent-variable
model to the resulting difference matrix and tests the group effect, with
optional covariate adjustment, cluster-size weighting, and multi-group
extension. A zero-inflated negative binomial simulator and a calibration
harness support validation at desk scale.
"""

from .inference import (
    CalibrationSummary,
    DECallRule,
    bh_adjust,
    calibrate,
    call_de,
    exact_rank_sum_pvalue,
)
from .lvm import (
    LatentModelConfig,
    LseConstraint,
    ModelFit,
    TestResult,
    closed_form_test,
    fit_latent_model,
    lse_solution,
    multi_group_test,
    wald_test,
)
from .pairwise import DifferenceMatrix, DifferenceMetric, build_difference_matrix
from .ranks import PIEstimate, logit_pi, mann_whitney_u, midranks, probabilistic_index
from .simulate import (
    SimDesign,
    ZinbParams,
    apply_covariate_effect,
    fold_change_transform,
    permute_labels,
    resample_parameters,
    sample_zinb,
    simulate_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "CalibrationSummary",
    "DECallRule",
    "DifferenceMatrix",
    "DifferenceMetric",
    "LatentModelConfig",
    "LseConstraint",
    "ModelFit",
    "PIEstimate",
    "SimDesign",
    "TestResult",
    "ZinbParams",
    "apply_covariate_effect",
    "bh_adjust",
    "build_difference_matrix",
    "calibrate",
    "call_de",
    "closed_form_test",
    "exact_rank_sum_pvalue",
    "fit_latent_model",
    "fold_change_transform",
    "logit_pi",
    "lse_solution",
    "mann_whitney_u",
    "midranks",
    "multi_group_test",
    "permute_labels",
    "probabilistic_index",
    "resample_parameters",
    "sample_zinb",
    "simulate_dataset",
    "wald_test",
    "__version__",
]
