"""Max-margin Gaussian-process domain adaptation at desk scale.

A variational GP classifier over deep MLP features, trained by alternating
variational inference with max-margin posterior separation on unlabeled
target data, plus MCDA and source-only baselines, Bayesian uncertainty
diagnostics, and a reproducible experiment CLI.
"""

__version__ = "0.1.0"

from .datagen import DomainDataset, gaussian_blobs_shift, load_csv_dataset, two_moons_shift
from .diffmath import Gradient, NonFiniteError, ParamVector, finite_diff_grad, value_and_grad
from .featurenet import FeatureNet, features, kernel_gram
from .gp_head import (
    PosteriorMoments,
    VariationalPosterior,
    kl,
    log_likelihood_softmax,
    moments,
    predict,
    sample_weights,
)
from .objectives import LossBreakdown, composite_losses, ll_estimate, ms_loss
from .trainer import (
    AdamState,
    TrainConfig,
    TrainHistory,
    adam_update,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .baselines import McdaModel, mcda_discrepancy, train_mcda, train_source_only
from .uncertainty import bayes_error, bhattacharyya, bpd, cohort_report

__all__ = [
    "__version__",
    "DomainDataset",
    "gaussian_blobs_shift",
    "load_csv_dataset",
    "two_moons_shift",
    "Gradient",
    "NonFiniteError",
    "ParamVector",
    "finite_diff_grad",
    "value_and_grad",
    "FeatureNet",
    "features",
    "kernel_gram",
    "PosteriorMoments",
    "VariationalPosterior",
    "kl",
    "log_likelihood_softmax",
    "moments",
    "predict",
    "sample_weights",
    "LossBreakdown",
    "composite_losses",
    "ll_estimate",
    "ms_loss",
    "AdamState",
    "TrainConfig",
    "TrainHistory",
    "adam_update",
    "evaluate",
    "load_checkpoint",
    "save_checkpoint",
    "train",
    "McdaModel",
    "mcda_discrepancy",
    "train_mcda",
    "train_source_only",
    "bayes_error",
    "bhattacharyya",
    "bpd",
    "cohort_report",
]
