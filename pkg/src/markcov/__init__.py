"""Joint latent-factor models for marked point processes with functional marks."""

from markcov.basis import BasisSystem, build_basis, eval_design, penalty_value
from markcov.datasets import load_auction_like, make_auction_like
from markcov.estimation import FitConfig, FitResult, fit
from markcov.inference import (
    BootstrapResult,
    InferenceResult,
    SingularFisherError,
    asymptotic_covariance,
    bootstrap_sd,
)
from markcov.likelihood import (
    dataset_loglik,
    laplace_loglik,
    penalized_loglik,
    posterior_mode,
    predict_scores,
)
from markcov.model import (
    Dataset,
    MarkedRealization,
    Theta,
    normalize_signs,
    validate_theta,
)
from markcov.modelselect import (
    ComponentChoice,
    CvPlan,
    CvResult,
    choose_components,
    cv_score,
    sequential_cv,
)
from markcov.simulate import (
    SimDesign,
    StudyReport,
    align_signs,
    expected_points,
    paper_design,
    run_study,
    sample_dataset,
)

__all__ = [
    "BasisSystem",
    "BootstrapResult",
    "ComponentChoice",
    "CvPlan",
    "CvResult",
    "Dataset",
    "FitConfig",
    "FitResult",
    "InferenceResult",
    "MarkedRealization",
    "SimDesign",
    "SingularFisherError",
    "StudyReport",
    "Theta",
    "align_signs",
    "asymptotic_covariance",
    "bootstrap_sd",
    "build_basis",
    "choose_components",
    "cv_score",
    "dataset_loglik",
    "eval_design",
    "expected_points",
    "fit",
    "laplace_loglik",
    "load_auction_like",
    "make_auction_like",
    "normalize_signs",
    "paper_design",
    "penalized_loglik",
    "penalty_value",
    "posterior_mode",
    "predict_scores",
    "run_study",
    "sample_dataset",
    "sequential_cv",
    "validate_theta",
]

__version__ = "0.1.0"
