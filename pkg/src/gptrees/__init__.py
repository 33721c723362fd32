"""Bayesian sum-of-trees regression with GP leaves and rotated splits."""

from .evaluate import (CvReport, PredictionSet, cross_validate, crps, fit_model,
                       predict, predict_dataset, rmse)
from .gp import KernelState, NumericsError, build_bundle, gp_predict, kernel_matrix
from .io import (ColumnSchema, Dataset, NormalizationTransform, fit_transform,
                 from_arrays, load_csv, load_draws, save_draws)
from .sampler import (Hyperparams, PosteriorDraws, TrainData, VARIANTS, calibrate,
                      gibbs_tau, partial_residuals, run)
from .simdata import (BenchmarkSpec, FriedmanSpec, benchmark_mean, friedman_mean,
                      gen_benchmark, gen_friedman)
from .trees import DecisionTree, SplitRule, log_tree_prior, propose_move, rotate_pair, route

__version__ = "0.1.0"
