"""Spatio-temporal Gaussian process hotspot detection.

A sparse variational GP with a non-stationary deep convolution kernel links
weekly county case counts (Gaussian, through a covariate mean) and hotspot
flags (Bernoulli) through one shared latent field.
"""

from .errors import DataError, ModelFileError, NumericalError, STGPError
from .data import (
    CaseTransform,
    CountyId,
    CovariateTensor,
    PanelDataset,
    build_covariates,
    ingest,
    read_panel,
    write_panel,
)
from .kernel import CoordinateScaler, DeepKernelParams, gram, kernel
from .mean import CovariateWeights, compute_mu, fit_omega
from .svgp import (
    BernoulliLikelihood,
    GaussianLikelihood,
    VariationalState,
    elbo,
    kl_qp,
    predict_cases,
    predict_hotspot_prob,
    predict_latent,
    q_f_marginals,
)
from .train import FittedModel, TrainConfig, forecast, load_model, save_model, train
from .detect import calibrate_thresholds, detect, precision_recall_f1, rolling_evaluate
from .synth import SynthConfig, synthesize

__version__ = "0.1.0"

__all__ = [
    "STGPError", "DataError", "NumericalError", "ModelFileError",
    "CaseTransform", "CountyId", "CovariateTensor", "PanelDataset",
    "build_covariates", "ingest", "read_panel", "write_panel",
    "CoordinateScaler", "DeepKernelParams", "gram", "kernel",
    "CovariateWeights", "compute_mu", "fit_omega",
    "BernoulliLikelihood", "GaussianLikelihood", "VariationalState", "elbo", "kl_qp",
    "predict_cases", "predict_hotspot_prob", "predict_latent", "q_f_marginals",
    "FittedModel", "TrainConfig", "forecast", "load_model", "save_model", "train",
    "calibrate_thresholds", "detect", "precision_recall_f1", "rolling_evaluate",
    "SynthConfig", "synthesize",
]
