"""Per-pixel depth uncertainty: sample fusion, Laplace loss, calibration and sparsification metrics,
a toy Bayesian regressor, and uncertainty-filtered ICP."""

from duq.errors import (
    ConfigurationError,
    DegenerateCorrespondenceError,
    DegenerateInputError,
    DomainError,
    DuqError,
    EmptyInputError,
    FormatError,
    InsufficientDataError,
    ShapeError,
    TrainingError,
)
from duq.predictive import (
    SIGMA_MIN,
    DepthRaster,
    GaussianPrediction,
    PredictiveSampleSet,
    fuse_samples,
    mixture_moments_oracle,
)
from duq.losses import laplace_nll, laplace_nll_grad
from duq.metrics import auce, ause_rmse, depth_metrics

__version__ = "0.1.0"
