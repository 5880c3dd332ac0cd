"""First-order Stein control variates ``g_theta(x) = theta . score(x)``.

Two fitting routes:

* ``fit_cv_empirical`` minimises the sample-splitting variance estimate of
  ``H_{k:m}(h - g_theta)`` over the first half of the replicates. Because the
  estimator is linear in the integrand this is a ridge-regularised least
  squares problem and is solved in closed form by default.
* ``fit_cv_bound`` minimises the right-hand side of the variance bound, with
  pi replaced by MCMC output, by derivative-free coordinate search.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from .estimator import EstimateBatch, UnbiasedEstimate, replicate, sigma_hat_full, sigma_hat_split
from .rkhs import BoundConstants, InterpolantNorm, KernelSpec


@dataclass(frozen=True)
class SteinCoefficients:
    theta: np.ndarray

    def __post_init__(self):
        theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta has non-finite entries")
        object.__setattr__(self, "theta", theta)

    @classmethod
    def zeros(cls, d: int) -> "SteinCoefficients":
        return cls(np.zeros(d))


@dataclass
class CvFitReport:
    theta: SteinCoefficients
    objective_before: float
    objective_after: float
    approach: str
    solver_info: dict = field(default_factory=dict)

    def csv_row(self, coordinate) -> list:
        return [
            coordinate,
            self.approach,
            self.objective_before,
            self.objective_after,
            float(np.linalg.norm(self.theta.theta)),
        ]


def _theta(theta) -> np.ndarray:
    return theta.theta if isinstance(theta, SteinCoefficients) else np.atleast_1d(np.asarray(theta, dtype=float))


def stein_cv_eval(theta, score_at_x) -> float:
    th = _theta(theta)
    s = np.asarray(score_at_x, dtype=float)
    if s.shape[-1] != th.shape[0]:
        raise ValueError(f"theta has length {th.shape[0]} but score has length {s.shape[-1]}")
    return s @ th


def cv_integrand(h: Callable, score: Callable, theta) -> Callable:
    """Pointwise ``x -> h(x) - theta . score(x)`` (vectorized)."""
    th = _theta(theta)

    def f(points):
        return np.asarray(h(points), dtype=float) - np.asarray(score(points), dtype=float) @ th

    return f


def _check_same_trajectories(h_batch: EstimateBatch, score_batches: Sequence[EstimateBatch]) -> None:
    taus = h_batch.taus
    for b in score_batches:
        if len(b) != len(h_batch) or not np.array_equal(b.taus, taus):
            raise ValueError("score batches do not come from the same trajectories as the integrand batch")


def fit_cv_empirical(
    h_batch: EstimateBatch,
    score_batches: Sequence[EstimateBatch],
    *,
    ridge_scale: float = 1e-8,
    solver: str = "closed_form",
    unbiased_split: bool = False,
) -> CvFitReport:
    """Fit theta by minimising ``sigma_hat_split(h - g_theta)``.

    Both batches span all R replicates; only the first floor(R/2) enter the
    fit, matching the sample-splitting estimator. The closed-form solution
    solves ``(S'S + eps I) theta = S'h`` on centred first-half values with
    ``eps = ridge_scale * trace(S'S) / d``.
    """
    _check_same_trajectories(h_batch, score_batches)
    H = h_batch.values
    S = np.column_stack([b.values for b in score_batches])
    R, d = S.shape
    half = R // 2
    if half < d + 1:
        warnings.warn(
            f"only {half} first-half replicates for {d} coefficients; relying on ridge regularisation",
            RuntimeWarning,
            stacklevel=2,
        )

    def objective(theta):
        return sigma_hat_split(H - S @ theta, unbiased=unbiased_split)

    hc = H[:half] - H[:half].mean()
    Sc = S[:half] - S[:half].mean(axis=0)
    A = Sc.T @ Sc
    tr = float(np.trace(A))
    eps = ridge_scale * tr / d if tr > 0 else ridge_scale
    before = objective(np.zeros(d))
    if solver == "closed_form":
        theta = np.linalg.solve(A + eps * np.eye(d), Sc.T @ hc)
        info = {"closed_form": True, "ridge": eps}
    elif solver == "iterative":
        res = minimize(lambda th: objective(th) + eps * th @ th / max(half, 1), np.zeros(d), method="BFGS")
        theta = res.x
        info = {"closed_form": False, "iterations": int(res.nit), "ridge": eps}
    else:
        raise ValueError(f"unknown solver {solver!r}")
    after = objective(theta)
    if after > before:
        theta, after = np.zeros(d), before
    return CvFitReport(SteinCoefficients(theta), before, after, "empirical", info)


def bound_objective(
    h_pi: np.ndarray,
    score_pi: np.ndarray,
    h_x0: np.ndarray,
    score_x0: np.ndarray,
    consts: BoundConstants,
    norm: InterpolantNorm | None = None,
    norm_rows: np.ndarray | None = None,
) -> Callable[[np.ndarray], float]:
    """``B(theta)`` from pre-evaluated integrand and score values."""
    p = 2.0 + consts.eta
    use_norm = consts.lam > 0 and norm is not None

    def B(theta):
        r = np.abs(h_pi - score_pi @ theta) ** p
        inner = float(np.mean(r))
        if use_norm:
            inner += consts.lam * norm(r[norm_rows])
        r0 = h_x0 - score_x0 @ theta
        return consts.gamma * inner ** (1.0 / p) + math.sqrt(float(np.mean(r0**2)))

    return B


def coordinate_search(f, x0, *, step=None, rel_tol=1e-8, max_evals=10_000, min_step=1e-12):
    """Derivative-free compass search with step halving.

    Returns ``(x, f(x), n_evals)``. Stops when a successful sweep improves the
    objective by a relative amount below ``rel_tol``, when the step falls
    below ``min_step``, or after ``max_evals`` evaluations.
    """
    x = np.array(x0, dtype=float)
    fx = f(x)
    evals = 1
    if not math.isfinite(fx):
        raise ValueError("objective is not finite at the starting point")
    step = 0.5 * max(1.0, float(np.max(np.abs(x)))) if step is None else step
    while evals < max_evals and step > min_step:
        f_start = fx
        for j in range(x.size):
            for sign in (1.0, -1.0):
                if evals >= max_evals:
                    break
                cand = x.copy()
                cand[j] += sign * step
                fc = f(cand)
                evals += 1
                if fc < fx:
                    x, fx = cand, fc
                    break
        if fx < f_start:
            if (f_start - fx) <= rel_tol * max(abs(f_start), 1e-300):
                break
        else:
            step *= 0.5
    return x, fx, evals


def fit_cv_bound(
    h: Callable,
    theta_init,
    pi_samples,
    x0_samples,
    consts: BoundConstants,
    kernel: KernelSpec,
    *,
    score: Callable,
    ridge: float = 1e-10,
    norm_points: int = 200,
    rel_tol: float = 1e-8,
    max_evals: int = 10_000,
) -> CvFitReport:
    """Fit theta by minimising the variance bound.

    ``B(theta) = gamma (mean_pi |h - g|^(2+eta) + lambda N(theta))^(1/(2+eta))
    + (mean_x0 (h - g)^2)^(1/2)`` where ``N`` is the interpolant RKHS norm of
    ``|h - g|^(2+eta)`` on an evenly thinned subset of at most
    ``norm_points`` pi-samples.
    """
    pi_samples = np.atleast_2d(np.asarray(pi_samples, dtype=float))
    x0_samples = np.atleast_2d(np.asarray(x0_samples, dtype=float))
    if pi_samples.size == 0 or x0_samples.size == 0:
        raise ValueError("pi_samples and x0_samples must be nonempty")
    theta0 = _theta(theta_init).copy()
    h_pi = np.asarray(h(pi_samples), dtype=float)
    s_pi = np.asarray(score(pi_samples), dtype=float)
    h_x0 = np.asarray(h(x0_samples), dtype=float)
    s_x0 = np.asarray(score(x0_samples), dtype=float)
    norm = rows = None
    if consts.lam > 0:
        rows = np.unique(np.linspace(0, len(pi_samples) - 1, min(norm_points, len(pi_samples))).astype(int))
        norm = InterpolantNorm(pi_samples[rows], kernel, ridge)
    B = bound_objective(h_pi, s_pi, h_x0, s_x0, consts, norm, rows)
    before = B(theta0)
    if not math.isfinite(before):
        raise ValueError("bound objective is not finite at theta_init")
    theta, after, evals = coordinate_search(B, theta0, rel_tol=rel_tol, max_evals=max_evals)
    return CvFitReport(SteinCoefficients(theta), before, after, "bound", {"evaluations": evals})


def combine_linear(h_batch: EstimateBatch, score_batches: Sequence[EstimateBatch], theta, label=None) -> EstimateBatch:
    """``H(h - g_theta)`` from per-component estimates on shared trajectories."""
    _check_same_trajectories(h_batch, score_batches)
    th = _theta(theta)
    out = []
    for r, e in enumerate(h_batch.estimates):
        mc = e.mcmc_part - math.fsum(th[j] * b.estimates[r].mcmc_part for j, b in enumerate(score_batches))
        bc = e.bias_correction - math.fsum(
            th[j] * b.estimates[r].bias_correction for j, b in enumerate(score_batches)
        )
        out.append(UnbiasedEstimate(mc + bc, mc, bc, e.tau))
    return EstimateBatch(out, h_batch.k, h_batch.m, label or h_batch.h_label, list(h_batch.replicate_ids))


def estimate_with_cv(
    model,
    cfg,
    init_sampler,
    h: Callable,
    theta,
    k: int,
    m: int,
    second_half_seeds: Sequence[int],
    *,
    workers: int = 1,
) -> EstimateBatch:
    """Fresh replicates of ``H_{k:m}(h - g_theta)`` on the given (held-out) seeds."""
    f = cv_integrand(h, model.score, theta)
    seeds = list(second_half_seeds)
    (batch,) = replicate(model, cfg, init_sampler, f, k, m, len(seeds), 0, seeds=seeds, workers=workers, labels=["h-g"])
    return batch


def variance_reduction_factor(batch_no_cv, batch_cv) -> float:
    a = sigma_hat_full(batch_no_cv)
    b = sigma_hat_full(batch_cv)
    if a == 0 and b == 0:
        return 1.0
    if b == 0:
        return math.inf
    return a / b
