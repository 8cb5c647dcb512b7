"""Neural operator flows: invertible maps between a Gaussian-process latent
function space and a data function space, with exact likelihoods and
Bayesian functional regression."""

from .errors import (ConfigError, DivergenceError, FactorizationError, FileFormatError, OpFlowError,
                     RejectionLimitError)
from .gp import (GaussianMomentPair, GaussianProcessSpec, Observations, TruncationBounds, gp_log_density,
                 gp_sample, gpr_posterior, matern_kernel, tgp_sample, w2_approx, w2_squared_gaussian)
from .grid import Grid, GridFunction, IndexSet, make_regular_grid
from .flow import FlowConfig, OpFlow, checkpoint_load, checkpoint_save
from .training import TrainConfig, TrainHistory, train
from .regression import MapConfig, PosteriorResult, SGLDConfig, map_estimate, sgld_sample
from .metrics import MetricReport, amplitude_histogram, autocovariance, f2id_score, msll, smse
from .datasets import Dataset, generate_dataset, load_dataset, pair_channels, save_dataset

__version__ = "0.1.0"
