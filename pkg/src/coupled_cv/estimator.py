"""Unbiased time-averaged estimators from coupled trajectories.

For a trajectory with meeting time ``tau`` and ``0 <= k <= m``::

    H_{k:m} = (m-k+1)^{-1} sum_{t=k}^{m} h(X_t)
              + sum_{t=k+1}^{tau-1} min(1, (t-k)/(m-k+1)) (h(X_t) - h(Y_{t-1}))

Integrands are vectorized: ``h(points)`` maps an array of shape ``(T, d)``
to shape ``(T,)`` (scalar integrand) or ``(T, q)`` (vector integrand).
"""

from __future__ import annotations

import math
import multiprocessing as mp
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .kernels import KernelConfig, make_kernel, run_coupled_lanes
from .rng import LaneStreams, replicate_seeds
from .targets import TargetModel

BLOCK_SIZE = 64


class EstimatorError(ValueError):
    pass


class NonMeetingError(RuntimeError):
    """Some replicates did not meet within the iteration cap."""

    def __init__(self, indices: Sequence[int]):
        self.indices = list(indices)
        super().__init__(f"replicates failed to meet: {self.indices}")


@dataclass(frozen=True)
class UnbiasedEstimate:
    value: float
    mcmc_part: float
    bias_correction: float
    tau: int


@dataclass
class EstimateBatch:
    estimates: list[UnbiasedEstimate]
    k: int
    m: int
    h_label: str = "h"
    replicate_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.replicate_ids:
            self.replicate_ids = list(range(len(self.estimates)))

    def __len__(self) -> int:
        return len(self.estimates)

    @property
    def values(self) -> np.ndarray:
        return np.array([e.value for e in self.estimates], dtype=float)

    @property
    def taus(self) -> np.ndarray:
        return np.array([e.tau for e in self.estimates], dtype=int)

    def subset(self, rows) -> "EstimateBatch":
        rows = list(rows)
        return EstimateBatch(
            [self.estimates[i] for i in rows], self.k, self.m, self.h_label, [self.replicate_ids[i] for i in rows]
        )


def _as_columns(values) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    return arr[:, None] if arr.ndim == 1 else arr


def _check_trajectory(traj, k: int, m: int) -> None:
    if not 0 <= k <= m:
        raise EstimatorError(f"need 0 <= k <= m, got k={k}, m={m}")
    if traj.tau is None:
        raise EstimatorError("estimate undefined: chains did not meet")
    if traj.T < max(m, traj.tau):
        raise EstimatorError(f"trajectory recorded to T={traj.T}, need max(m, tau)={max(m, traj.tau)}")


def h_km_vector(traj, h_vec: Callable, k: int, m: int) -> list[UnbiasedEstimate]:
    _check_trajectory(traj, k, m)
    tau = traj.tau
    n = m - k + 1
    hx = _as_columns(h_vec(traj.xs))
    q = hx.shape[1]
    if tau - 1 >= k + 1:
        ts = np.arange(k + 1, tau)
        hy = _as_columns(h_vec(traj.ys[k : tau - 1]))
        weights = np.minimum(1.0, (ts - k) / n)
        terms = weights[:, None] * (hx[ts] - hy)
    else:
        terms = np.zeros((0, q))
    out = []
    for j in range(q):
        mcmc = math.fsum(hx[k : m + 1, j]) / n
        corr = math.fsum(terms[:, j])
        out.append(UnbiasedEstimate(mcmc + corr, mcmc, corr, tau))
    return out


def h_km(traj, h: Callable, k: int, m: int) -> UnbiasedEstimate:
    return h_km_vector(traj, h, k, m)[0]


def deltas(traj, h: Callable, t_max: int) -> np.ndarray:
    """Increments ``Delta_0 = h(X_0)``, ``Delta_t = h(X_t) - h(Y_{t-1})``; zero for ``t >= tau``."""
    if traj.tau is None:
        raise EstimatorError("increments undefined: chains did not meet")
    out = np.zeros(t_max + 1)
    hx0 = np.asarray(h(traj.xs[:1]), dtype=float).reshape(-1)
    out[0] = hx0[0]
    last = min(traj.tau - 1, t_max)
    if last >= 1:
        hx = np.asarray(h(traj.xs[1 : last + 1]), dtype=float).reshape(-1)
        hy = np.asarray(h(traj.ys[:last]), dtype=float).reshape(-1)
        out[1 : last + 1] = hx - hy
    return out


# ---------------------------------------------------------------------------
# Replication
# ---------------------------------------------------------------------------

_JOB = None


def _run_block(block: int):
    kernel, init_sampler, k, m, seeds, max_iterations, post = _JOB
    chunk = seeds[block * BLOCK_SIZE : (block + 1) * BLOCK_SIZE]
    trajs = run_coupled_lanes(kernel, init_sampler, k, m, LaneStreams.from_seeds(chunk), max_iterations)
    return [post(tr) for tr in trajs] if post is not None else trajs


def simulate_replicates(
    kernel,
    init_sampler,
    k: int,
    m: int,
    seeds: Sequence[int],
    max_iterations: int,
    workers: int = 1,
    post: Callable | None = None,
) -> list:
    """Run one trajectory per seed; optionally map each through ``post``.

    Replicates are simulated in fixed blocks of :data:`BLOCK_SIZE` seeds, so the
    output is identical for every worker count. Results come back in seed order.
    """
    global _JOB
    seeds = list(seeds)
    n_blocks = -(-len(seeds) // BLOCK_SIZE)
    _JOB = (kernel, init_sampler, k, m, seeds, max_iterations, post)
    try:
        if workers <= 1 or n_blocks <= 1:
            parts = [_run_block(b) for b in range(n_blocks)]
        else:
            ctx = mp.get_context("fork")
            with ctx.Pool(min(workers, n_blocks)) as pool:
                parts = pool.map(_run_block, range(n_blocks), chunksize=1)
    finally:
        _JOB = None
    return [item for part in parts for item in part]


def _trajectory_estimates(h_vec, k, m):
    def post(traj):
        if traj.tau is None:
            return None
        return h_km_vector(traj, h_vec, k, m)

    return post


def replicate(
    model_or_kernel,
    cfg: KernelConfig,
    init_sampler,
    h_vec: Callable,
    k: int,
    m: int,
    R: int,
    root_seed: int,
    *,
    labels: Sequence[str] | None = None,
    workers: int = 1,
    seeds: Sequence[int] | None = None,
) -> list[EstimateBatch]:
    """R independent unbiased estimates, one :class:`EstimateBatch` per integrand component.

    Replicate ``r`` uses seed ``replicate_seed(root_seed, r)`` unless ``seeds``
    is given explicitly.
    """
    if R < 2:
        raise ValueError("replicate needs R >= 2")
    kernel = make_kernel(model_or_kernel, cfg) if isinstance(model_or_kernel, TargetModel) else model_or_kernel
    seeds = list(seeds) if seeds is not None else replicate_seeds(root_seed, R)
    if len(seeds) != R:
        raise ValueError(f"got {len(seeds)} seeds for R={R}")
    results = simulate_replicates(
        kernel, init_sampler, k, m, seeds, cfg.max_iterations, workers, _trajectory_estimates(h_vec, k, m)
    )
    failed = [i for i, r in enumerate(results) if r is None]
    if failed:
        raise NonMeetingError(failed)
    q = len(results[0])
    labels = list(labels) if labels is not None else [f"h{j}" for j in range(q)]
    return [EstimateBatch([res[j] for res in results], k, m, labels[j]) for j in range(q)]


# ---------------------------------------------------------------------------
# Aggregates
# ---------------------------------------------------------------------------


def _values(batch) -> np.ndarray:
    if isinstance(batch, EstimateBatch):
        return batch.values
    return np.asarray(batch, dtype=float).reshape(-1)


def pi_hat(batch) -> float:
    v = _values(batch)
    if v.size == 0:
        raise EstimatorError("empty batch")
    return math.fsum(v) / v.size


def sigma_hat_split(batch, unbiased: bool = False) -> float:
    """Sample-splitting variance estimate over the first floor(R/2) replicates.

    Returns the squared quantity. The default divides by floor(R/2);
    ``unbiased=True`` divides by floor(R/2) - 1 instead.
    """
    v = _values(batch)
    if v.size < 4:
        raise EstimatorError(f"sigma_hat_split needs R >= 4, got R={v.size}")
    half = v[: v.size // 2]
    mean = math.fsum(half) / half.size
    denom = half.size - 1 if unbiased else half.size
    return math.fsum((half - mean) ** 2) / denom


def sigma_hat_full(batch) -> float:
    """Sample variance over all replicates with the 1/(R-1) denominator."""
    v = _values(batch)
    if v.size < 2:
        raise EstimatorError(f"sigma_hat_full needs R >= 2, got R={v.size}")
    mean = math.fsum(v) / v.size
    return math.fsum((v - mean) ** 2) / (v.size - 1)
