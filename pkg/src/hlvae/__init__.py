"""Heterogeneous longitudinal variational autoencoder on a small numpy autodiff core."""

from .errors import HLVAEError
from .inference import TrainConfig, elbo, exact_kl, minibatch_kl_bound, train
from .kernels import AdditiveGP, parse_kernel
from .metrics import MetricReport, accuracy_error, displacement_error, nrmse, predictive_nll_report
from .model import HLVAE, ModelConfig
from .prediction import impute, latent_predict, predict_future
from .schema import DatasetTable, FeatureSpec, CovariateSpec, Schema, load_csv, write_csv
from .splits import HeldOutCells, inject_mcar, split_longitudinal
from .synthetic import GeneratorConfig, generate_synthetic_longitudinal

__version__ = "0.1.0"

__all__ = [
    "AdditiveGP", "CovariateSpec", "DatasetTable", "FeatureSpec", "GeneratorConfig", "HLVAE",
    "HLVAEError", "HeldOutCells", "MetricReport", "ModelConfig", "Schema", "TrainConfig",
    "accuracy_error", "displacement_error", "elbo", "exact_kl", "generate_synthetic_longitudinal",
    "impute", "inject_mcar", "latent_predict", "load_csv", "minibatch_kl_bound", "nrmse",
    "parse_kernel", "predict_future", "predictive_nll_report", "split_longitudinal", "train",
    "write_csv",
]
