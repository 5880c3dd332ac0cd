"""Kernel machinery, the explicit variance-bound constants, and certification.

Notation follows the unbiased-MCMC assumptions: a uniform moment bound
``sup_t E|h(X_t)|^(2+eta) <= D`` and a geometric meeting-time tail
``P(tau > t) <= C delta^t``. From these,

* ``delta_tilde = delta^(eta/(2+eta))``
* ``C_tilde = 4 C^(eta/(2+eta)) D^(2/(2+eta))`` bounds ``E[Delta_t^2] <= C_tilde delta_tilde^t``
* ``gamma^2 = 4 C^(eta/(2+eta)) delta^(eta/(2+eta)) / (1 - delta^(eta/(4+2eta)))^2``
* ``C_bar = gamma^2 D^(2/(2+eta))`` bounds ``E[(H_0^{n'} - H_0^n)^2] <= C_bar delta_tilde^n``

and the standard deviation of ``H_{0:0}`` is at most
``gamma (pi(|h|^(2+eta)) + lambda ||h|^(2+eta)||_H)^(1/(2+eta)) + E[h(X_0)^2]^(1/2)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import norm

from .estimator import deltas

Z99 = float(norm.ppf(0.99))
EPS = float(np.finfo(float).eps)


# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------


def _check_delta(delta: float) -> None:
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")


def delta_tilde(delta: float, eta: float) -> float:
    _check_delta(delta)
    return delta ** (eta / (2.0 + eta))


def gamma_const(C: float, delta: float, eta: float) -> float:
    _check_delta(delta)
    if not C > 0 or not eta > 0:
        raise ValueError("C and eta must be positive")
    a = eta / (2.0 + eta)
    # 1 - delta^(eta/(4+2eta)) via expm1: the naive form cancels badly as delta -> 1
    denom = -math.expm1(0.5 * a * math.log(delta))
    return 2.0 * math.sqrt(C**a * delta**a) / denom


def c_tilde(C: float, D: float, eta: float) -> float:
    if C < 0 or D < 0 or not eta > 0:
        raise ValueError("C and D must be nonnegative and eta positive")
    return 4.0 * C ** (eta / (2.0 + eta)) * D ** (2.0 / (2.0 + eta))


def c_bar(gamma: float, D: float, eta: float) -> float:
    if gamma < 0 or D < 0 or not eta > 0:
        raise ValueError("gamma and D must be nonnegative and eta positive")
    return gamma**2 * D ** (2.0 / (2.0 + eta))


@dataclass(frozen=True)
class BoundConstants:
    eta: float
    C: float = 1.0
    delta: float = 0.5
    D: float = 0.0
    lam: float = 0.0
    gamma: float | None = None

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError("eta must be nonnegative")
        if self.lam < 0 or self.D < 0:
            raise ValueError("lambda and D must be nonnegative")
        if self.gamma is None:
            object.__setattr__(self, "gamma", gamma_const(self.C, self.delta, self.eta))
        elif self.gamma < 0:
            raise ValueError("gamma must be nonnegative")

    @property
    def delta_tilde(self) -> float:
        return delta_tilde(self.delta, self.eta)

    @property
    def c_tilde(self) -> float:
        return c_tilde(self.C, self.D, self.eta)

    @property
    def c_bar(self) -> float:
        return c_bar(self.gamma, self.D, self.eta)


@dataclass(frozen=True)
class TailFit:
    C: float
    delta: float
    degenerate: bool = False


def fit_geometric_tail(meeting_times: Sequence[int]) -> TailFit:
    """Fit a geometric envelope ``P(tau > t) <= C delta^t`` to observed meeting times.

    The log survival function is fitted by least squares where it is at
    least ``10/n``; the intercept is inflated by 1.5 and then raised until the
    envelope dominates the empirical survival at every observed ``t``.
    """
    taus = np.asarray(meeting_times, dtype=int)
    n = taus.size
    if n < 100:
        raise ValueError(f"need at least 100 meeting times, got {n}")
    if np.any(taus < 1):
        raise ValueError("meeting times must be positive integers")
    t_grid = np.arange(taus.max() + 1)
    surv = (taus[None, :] > t_grid[:, None]).mean(axis=1)
    use = surv >= 10.0 / n
    observed = surv > 0
    if np.all(taus == 1):
        return TailFit(C=1.0, delta=EPS, degenerate=True)
    if use.sum() < 2:
        # too few well-populated points for a regression: geometric MLE, then the envelope correction
        delta = float(np.clip(1.0 - 1.0 / taus.mean(), EPS, 1.0 - EPS))
        C = float(np.max(surv[observed] / delta ** t_grid[observed]))
        return TailFit(C=C, delta=delta, degenerate=True)
    slope, intercept = np.polyfit(t_grid[use], np.log(surv[use]), 1)
    delta = float(np.clip(np.exp(slope), EPS, 1.0 - EPS))
    C = 1.5 * math.exp(intercept)
    C = max(C, float(np.max(surv[observed] / delta ** t_grid[observed])))
    return TailFit(C=C, delta=delta)


# ---------------------------------------------------------------------------
# Kernels, MMD and RKHS norms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian kernel ``exp(-|x - y|^2 / (2 bandwidth^2))``; unit diagonal."""

    bandwidth: float = 1.0

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")

    def matrix(self, a, b) -> np.ndarray:
        a = _as_points(a)
        b = _as_points(b)
        return np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * self.bandwidth**2))

    def __call__(self, x, y) -> float:
        return float(self.matrix(x, y)[0, 0])


def _as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr[:, None]
    return arr


def gram(points, kernel: KernelSpec) -> np.ndarray:
    pts = _as_points(points)
    if len(pts) == 0:
        raise ValueError("gram needs at least one point")
    G = kernel.matrix(pts, pts)
    np.fill_diagonal(G, 1.0)
    return G


def _mean_kernel(a, b, kernel, exclude_diagonal=False, block=1024):
    total = 0.0
    for start in range(0, len(a), block):
        K = kernel.matrix(a[start : start + block], b)
        total += K.sum()
        if exclude_diagonal:
            total -= K.shape[0]
    if exclude_diagonal:
        return total / (len(a) * (len(a) - 1))
    return total / (len(a) * len(b))


def mmd(samples_a, samples_b, kernel: KernelSpec, unbiased: bool = False) -> float:
    """Maximum mean discrepancy between two samples.

    The default is the biased V-statistic, square-rooted after clamping at 0.
    ``unbiased=True`` returns the U-statistic estimate of the *squared* MMD,
    which may be negative.
    """
    a, b = _as_points(samples_a), _as_points(samples_b)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both sample sets must be nonempty")
    if unbiased:
        if len(a) < 2 or len(b) < 2:
            raise ValueError("the U-statistic needs at least two points per sample")
        return (
            _mean_kernel(a, a, kernel, True) + _mean_kernel(b, b, kernel, True) - 2.0 * _mean_kernel(a, b, kernel)
        )
    sq = _mean_kernel(a, a, kernel) + _mean_kernel(b, b, kernel) - 2.0 * _mean_kernel(a, b, kernel)
    return math.sqrt(max(sq, 0.0))


def embedding_distance(p, q, G: np.ndarray) -> float:
    """Exact MMD between two distributions on a finite support with Gram matrix ``G``."""
    diff = np.asarray(p, dtype=float) - np.asarray(q, dtype=float)
    return math.sqrt(max(float(diff @ G @ diff), 0.0))


class InterpolantNorm:
    """RKHS norm of the minimum-norm kernel interpolant on fixed points.

    The Gram eigendecomposition is computed once, so repeated evaluations for
    different value vectors cost O(n^2).
    """

    def __init__(self, points, kernel: KernelSpec, ridge: float = 1e-10):
        if ridge < 0:
            raise ValueError("ridge must be nonnegative")
        G = gram(points, kernel)
        evals, evecs = np.linalg.eigh(G)
        evals = np.clip(evals, 0.0, None)
        if ridge == 0 and evals[0] <= len(G) * EPS * evals[-1]:
            raise ValueError("Gram matrix is singular; use a positive ridge")
        self.evals = evals
        self.evecs = evecs
        self.ridge = ridge
        self._weights = evals / (evals + ridge) ** 2

    def __call__(self, values) -> float:
        proj = self.evecs.T @ np.asarray(values, dtype=float)
        return math.sqrt(max(float(np.sum(self._weights * proj**2)), 0.0))


def rkhs_norm_interpolant(points, values, kernel: KernelSpec, ridge: float = 1e-10) -> float:
    """Norm of ``f = sum_i alpha_i K(., x_i)`` with ``(G + ridge I) alpha = values``."""
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.shape[0] != len(_as_points(points)):
        raise ValueError("need one value per point")
    if not np.any(values):
        return 0.0
    return InterpolantNorm(points, kernel, ridge)(values)


def bound_rhs(
    h_values_on_pi_samples,
    h_norm_surrogate: float,
    h_x0_second_moment: float,
    consts: BoundConstants,
    *,
    pi_moment: float | None = None,
) -> float:
    """Right-hand side of the variance bound.

    ``pi(|h|^(2+eta))`` is the sample mean over ``h_values_on_pi_samples``
    unless an exact ``pi_moment`` is supplied.
    """
    if h_norm_surrogate < 0 or h_x0_second_moment < 0:
        raise ValueError("norm and second-moment inputs must be nonnegative")
    p = 2.0 + consts.eta
    if pi_moment is None:
        vals = np.abs(np.asarray(h_values_on_pi_samples, dtype=float))
        if vals.size == 0:
            raise ValueError("no pi-samples given")
        pi_moment = float(np.mean(vals**p))
    elif pi_moment < 0:
        raise ValueError("pi_moment must be nonnegative")
    inner = pi_moment + consts.lam * h_norm_surrogate
    return consts.gamma * inner ** (1.0 / p) + math.sqrt(h_x0_second_moment)


# ---------------------------------------------------------------------------
# Certification
# ---------------------------------------------------------------------------

CERTIFIED, FAILED, INCONCLUSIVE = "certified", "failed", "inconclusive"


@dataclass(frozen=True)
class CheckRow:
    check_name: str
    t_or_n: str
    empirical: float
    bound: float
    status: str

    @property
    def margin(self) -> float:
        return self.bound - self.empirical


@dataclass
class CertificationReport:
    rows: list[CheckRow] = field(default_factory=list)

    def extend(self, other: "CertificationReport") -> "CertificationReport":
        self.rows.extend(other.rows)
        return self

    def by_check(self, name: str) -> list[CheckRow]:
        return [r for r in self.rows if r.check_name == name]

    @property
    def failed(self) -> bool:
        return any(r.status == FAILED for r in self.rows)

    def all_certified(self, names: Sequence[str] | None = None) -> bool:
        rows = self.rows if names is None else [r for r in self.rows if r.check_name in names]
        return bool(rows) and all(r.status == CERTIFIED for r in rows)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["check_name", "t_or_n", "empirical", "bound", "margin", "status"])
            for r in self.rows:
                writer.writerow([r.check_name, r.t_or_n, _fmt(r.empirical), _fmt(r.bound), _fmt(r.margin), r.status])


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _mc_status(est: float, se: float, bound: float) -> str:
    if est - Z99 * se > bound:
        return FAILED
    if se > 0.2 * bound:
        return INCONCLUSIVE
    if est + Z99 * se <= bound:
        return CERTIFIED
    return INCONCLUSIVE


def _mc_check(name: str, label: str, samples: np.ndarray, bound: float) -> CheckRow:
    n = samples.size
    est = float(np.mean(samples))
    se = float(np.std(samples, ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return CheckRow(name, label, est, bound, _mc_status(est, se, bound))


def _exact_check(name: str, label: str, value: float, bound: float) -> CheckRow:
    ok = value <= bound * (1.0 + 1e-12) + 1e-300
    return CheckRow(name, label, value, bound, CERTIFIED if ok else FAILED)


def certify_appendix_chain(
    traj_source,
    h,
    consts: BoundConstants,
    t_max: int,
    n_mc: int,
    *,
    n_values: Sequence[int] = (0, 2, 5),
    n_prime_max: int = 30,
    seed: int = 0,
) -> CertificationReport:
    """Monte Carlo check of the increment bounds behind the variance bound.

    ``traj_source.trajectories(n, k, m, seed)`` must return coupled
    trajectories. If the source also exposes ``exact_tail(t_max)`` and
    ``exact_moment_sup(h, eta)``, the two premises (geometric tail, moment
    bound) are checked exactly; otherwise the tail is checked empirically.

    Checks: ``tail_envelope`` P(tau>t) <= C delta^t; ``moment_D``;
    ``delta_moment`` E|Delta_t|^(2+eta) <= 2^(2+eta) D; ``delta_sq``
    E[Delta_t^2] <= C_tilde delta_tilde^t for t <= t_max; ``increment_sq``
    E[(H_0^{n'} - H_0^n)^2] <= C_bar delta_tilde^n.
    """
    horizon = max(t_max, n_prime_max)
    trajs = traj_source.trajectories(n_mc, 0, horizon, seed)
    if any(tr.tau is None for tr in trajs):
        raise RuntimeError("some trajectories did not meet; certification undefined")
    d = np.stack([deltas(tr, h, horizon) for tr in trajs])
    taus = np.array([tr.tau for tr in trajs])
    report = CertificationReport()
    p = 2.0 + consts.eta
    dt = consts.delta_tilde

    if hasattr(traj_source, "exact_tail"):
        tail = traj_source.exact_tail(horizon)
        for t in range(horizon + 1):
            report.rows.append(_exact_check("tail_envelope", str(t), float(tail[t]), consts.C * consts.delta**t))
    else:
        for t in range(horizon + 1):
            report.rows.append(
                _mc_check("tail_envelope", str(t), (taus > t).astype(float), consts.C * consts.delta**t)
            )
    if hasattr(traj_source, "exact_moment_sup"):
        report.rows.append(_exact_check("moment_D", "sup", traj_source.exact_moment_sup(h, consts.eta), consts.D))

    for t in range(t_max + 1):
        report.rows.append(_mc_check("delta_moment", str(t), np.abs(d[:, t]) ** p, 2.0**p * consts.D))
    for t in range(t_max + 1):
        report.rows.append(_mc_check("delta_sq", str(t), d[:, t] ** 2, consts.c_tilde * dt**t))
    partial = np.cumsum(d, axis=1)
    for n in n_values:
        for n_prime in range(n + 1, n_prime_max + 1):
            diff = partial[:, n_prime] - partial[:, n]
            report.rows.append(_mc_check("increment_sq", f"{n}:{n_prime}", diff**2, consts.c_bar * dt**n))
    return report


def certify_main_bound(batch, rhs: float) -> CertificationReport:
    """Check ``sd(H_{0:0}) <= rhs`` using a 99% one-sided interval on the standard deviation."""
    v = batch.values if hasattr(batch, "values") else np.asarray(batch, dtype=float)
    if getattr(batch, "k", 0) != 0 or getattr(batch, "m", 0) != 0:
        raise ValueError("the main bound is stated for k = m = 0")
    n = v.size
    if n < 2:
        raise ValueError("need at least two replicates")
    centred = v - v.mean()
    var = float(np.mean(centred**2)) * n / (n - 1)
    se_var = math.sqrt(max(float(np.mean(centred**4)) - var**2, 0.0) / n)
    sd = math.sqrt(var)
    upper = math.sqrt(var + Z99 * se_var)
    lower = math.sqrt(max(var - Z99 * se_var, 0.0))
    se_sd = se_var / (2.0 * sd) if sd > 0 else 0.0
    if lower > rhs:
        status = FAILED
    elif se_sd > 0.2 * rhs:
        status = INCONCLUSIVE
    elif upper <= rhs:
        status = CERTIFIED
    else:
        status = INCONCLUSIVE
    return CertificationReport([CheckRow("main_bound", "0:0", sd, rhs, status)])
