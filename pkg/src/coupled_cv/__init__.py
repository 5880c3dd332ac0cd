"""Unbiased MCMC with coupled chains and first-order Stein control variates."""

from .estimator import EstimateBatch, UnbiasedEstimate, h_km, h_km_vector, pi_hat, replicate, sigma_hat_full, sigma_hat_split
from .kernels import CoupledState, CoupledTrajectory, KernelConfig, gaussian_init, run_coupled
from .rkhs import BoundConstants, KernelSpec, bound_rhs, c_bar, c_tilde, gamma_const
from .stein import SteinCoefficients, fit_cv_bound, fit_cv_empirical, variance_reduction_factor
from .targets import RegressionData, TargetModel, make_gaussian, make_logistic_regression

__version__ = "0.1.0"
