"""Mixed-effects random forests for longitudinal data with serial correlation."""

__version__ = "0.1.0"

from .data import (IndividualBlock, LongitudinalDataset, VarianceComponents, load_dataset,
                   marginal_covariance, split_train_test)
from .kernels import KernelSpec, kernel_matrix, parse_kernel
from .cart import RegressionTree, fit_tree, gls_refit_leaves
from .forest import Forest, fit_forest, oob_error, variable_importance
from .em import (FittedModel, MethodSpec, blup, fit, fit_variances, log_likelihood, select_alpha,
                 update_variances)
from .prediction import PredictionQuery, interpolate_omega, predict_outcome

__all__ = [
    "IndividualBlock", "LongitudinalDataset", "VarianceComponents", "load_dataset",
    "marginal_covariance", "split_train_test", "KernelSpec", "kernel_matrix", "parse_kernel",
    "RegressionTree", "fit_tree", "gls_refit_leaves", "Forest", "fit_forest", "oob_error",
    "variable_importance", "FittedModel", "MethodSpec", "blup", "fit", "fit_variances", "log_likelihood",
    "select_alpha", "update_variances", "PredictionQuery", "interpolate_omega", "predict_outcome",
]
