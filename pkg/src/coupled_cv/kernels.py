"""Coupled Metropolis-Hastings kernels and lag-1 coupled trajectories.

States are batched: ``x`` and ``y`` have shape ``(n_lanes, dim)`` and every
kernel method receives the stream object plus the lane indices it is
advancing, so each lane draws from its own generator.

Trajectory convention: ``X_0, Y_0`` are drawn independently from the initial
distribution, ``X_1`` is one marginal step from ``X_0``, and afterwards the
pair ``(X_t, Y_{t-1})`` moves jointly. The meeting time is
``tau = min{t >= 1 : X_t = Y_{t-1}}``; once met the Y chain is a copy of X.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .rng import SharedStream, as_streams, make_generator
from .targets import TargetModel

MAX_COUPLING_ATTEMPTS = 10**6

InitSampler = Callable[[object, np.ndarray], np.ndarray]


class CouplingError(RuntimeError):
    """Rejection branch of the maximal coupling did not terminate."""


@dataclass(frozen=True)
class KernelConfig:
    kind: str = "coupled_rwm"
    step_size: float | None = None
    max_iterations: int = 100_000

    def __post_init__(self):
        if self.kind not in ("coupled_rwm", "coupled_mala"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be a positive integer")

    def resolved_step_size(self, dim: int) -> float:
        if self.step_size is not None:
            return float(self.step_size)
        if self.kind == "coupled_rwm":
            return 2.38 / math.sqrt(dim)
        return dim ** (-1.0 / 6.0)


@dataclass
class CoupledState:
    x: np.ndarray
    y: np.ndarray
    met: bool = False

    def __post_init__(self):
        self.x = np.atleast_1d(np.asarray(self.x, dtype=float))
        self.y = np.atleast_1d(np.asarray(self.y, dtype=float))
        if self.x.shape != self.y.shape:
            raise ValueError("x and y must have the same shape")
        if self.met and not np.array_equal(self.x, self.y):
            raise ValueError("a met state must have x == y")


@dataclass
class CoupledTrajectory:
    """One lag-1 coupled realization.

    ``xs`` holds X_0..X_T (shape ``(T+1, d)``), ``ys`` holds Y_0..Y_{T-1}
    (shape ``(T, d)``). ``tau`` is None when the chains failed to meet
    within the iteration cap.
    """

    xs: np.ndarray
    ys: np.ndarray
    tau: int | None

    @property
    def T(self) -> int:
        return self.xs.shape[0] - 1

    @property
    def met(self) -> bool:
        return self.tau is not None


class CoupledKernel(Protocol):
    def step(self, x: np.ndarray, streams, lanes: np.ndarray) -> np.ndarray: ...

    def coupled_step(
        self, x: np.ndarray, y: np.ndarray, met: np.ndarray, streams, lanes: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]: ...


def _sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a - b
    return np.einsum("ij,ij->i", diff, diff)


def maximal_coupling_batch(mean_x, mean_y, scale, streams, lanes):
    """Maximally couple N(mean_x, scale^2 I) and N(mean_y, scale^2 I) lane by lane.

    Draw X from the first law and accept Y = X with probability
    min(1, q(X)/p(X)); otherwise draw Y from the second law by rejection,
    accepting a candidate with probability 1 - min(1, p(Y)/q(Y)).
    Both outputs are exact draws from their marginals.
    """
    n, d = mean_x.shape
    inv2s2 = 0.5 / scale**2
    px = mean_x + scale * streams.normal(lanes, d)
    with np.errstate(divide="ignore"):
        log_u = np.log(streams.uniform(lanes))
    log_p = -inv2s2 * _sq_dist(px, mean_x)
    log_q = -inv2s2 * _sq_dist(px, mean_y)
    coupled = log_u + log_p <= log_q
    py = px.copy()
    pending = np.flatnonzero(~coupled)
    attempts = 0
    while pending.size:
        attempts += 1
        if attempts > MAX_COUPLING_ATTEMPTS:
            raise CouplingError(f"maximal coupling exceeded {MAX_COUPLING_ATTEMPTS} rejection attempts")
        sub = lanes[pending]
        cand = mean_y[pending] + scale * streams.normal(sub, d)
        with np.errstate(divide="ignore"):
            log_v = np.log(streams.uniform(sub))
        lq = -inv2s2 * _sq_dist(cand, mean_y[pending])
        lp = -inv2s2 * _sq_dist(cand, mean_x[pending])
        ok = log_v + lq > lp
        py[pending[ok]] = cand[ok]
        pending = pending[~ok]
    return px, py, coupled


def maximal_coupling_gaussians(mean_x, mean_y, scale: float, rng):
    """Single-draw maximal coupling; returns ``(proposal_x, proposal_y, coupled)``."""
    mx = np.atleast_1d(np.asarray(mean_x, dtype=float))
    my = np.atleast_1d(np.asarray(mean_y, dtype=float))
    if mx.shape != my.shape:
        raise ValueError("mean_x and mean_y must have the same dimension")
    if not scale > 0:
        raise ValueError("scale must be positive")
    px, py, c = maximal_coupling_batch(mx[None], my[None], scale, as_streams(rng), np.array([0]))
    return px[0], py[0], bool(c[0])


def _finite_log_density(model: TargetModel, x: np.ndarray) -> np.ndarray:
    with np.errstate(all="ignore"):
        lp = np.asarray(model.log_density(x), dtype=float)
    return np.where(np.isnan(lp), -np.inf, lp)


def _accept(log_u, log_ratio):
    return log_u <= np.where(np.isnan(log_ratio), -np.inf, log_ratio)


class CoupledRWM:
    """Random-walk Metropolis with maximally coupled Gaussian proposals."""

    def __init__(self, model: TargetModel, step_size: float):
        self.model = model
        self.step_size = float(step_size)

    def step(self, x, streams, lanes):
        prop = x + self.step_size * streams.normal(lanes, x.shape[1])
        with np.errstate(all="ignore"):
            log_u = np.log(streams.uniform(lanes))
            ratio = _finite_log_density(self.model, prop) - _finite_log_density(self.model, x)
        return np.where(_accept(log_u, ratio)[:, None], prop, x)

    def coupled_step(self, x, y, met, streams, lanes):
        px, py, coupled = maximal_coupling_batch(x, y, self.step_size, streams, lanes)
        with np.errstate(all="ignore"):
            log_u = np.log(streams.uniform(lanes))
            rx = _finite_log_density(self.model, px) - _finite_log_density(self.model, x)
            ry = _finite_log_density(self.model, py) - _finite_log_density(self.model, y)
        ax, ay = _accept(log_u, rx), _accept(log_u, ry)
        return _finish(x, y, met, px, py, ax, ay, coupled)


class CoupledMALA:
    """Metropolis-adjusted Langevin with maximally coupled drifted proposals."""

    def __init__(self, model: TargetModel, step_size: float):
        self.model = model
        self.step_size = float(step_size)

    def _drift_mean(self, x):
        with np.errstate(all="ignore"):
            return x + 0.5 * self.step_size**2 * np.asarray(self.model.score(x), dtype=float)

    def _log_ratio(self, x, mean_x, prop):
        # log pi(prop) + log q(x | prop) - log pi(x) - log q(prop | x)
        inv2s2 = 0.5 / self.step_size**2
        mean_prop = self._drift_mean(prop)
        with np.errstate(all="ignore"):
            return (
                _finite_log_density(self.model, prop)
                - _finite_log_density(self.model, x)
                - inv2s2 * _sq_dist(x, mean_prop)
                + inv2s2 * _sq_dist(prop, mean_x)
            )

    def step(self, x, streams, lanes):
        mean_x = self._drift_mean(x)
        prop = mean_x + self.step_size * streams.normal(lanes, x.shape[1])
        with np.errstate(divide="ignore"):
            log_u = np.log(streams.uniform(lanes))
        ratio = self._log_ratio(x, mean_x, prop)
        return np.where(_accept(log_u, ratio)[:, None], prop, x)

    def coupled_step(self, x, y, met, streams, lanes):
        mean_x, mean_y = self._drift_mean(x), self._drift_mean(y)
        px, py, coupled = maximal_coupling_batch(mean_x, mean_y, self.step_size, streams, lanes)
        with np.errstate(divide="ignore"):
            log_u = np.log(streams.uniform(lanes))
        ax = _accept(log_u, self._log_ratio(x, mean_x, px))
        ay = _accept(log_u, self._log_ratio(y, mean_y, py))
        return _finish(x, y, met, px, py, ax, ay, coupled)


def _finish(x, y, met, px, py, ax, ay, coupled):
    new_x = np.where(ax[:, None], px, x)
    new_y = np.where(ay[:, None], py, y)
    new_met = met | (coupled & ax & ay)
    new_y[new_met] = new_x[new_met]
    return new_x, new_y, new_met


def make_kernel(model: TargetModel, cfg: KernelConfig):
    h = cfg.resolved_step_size(model.dim)
    if cfg.kind == "coupled_rwm":
        return CoupledRWM(model, h)
    return CoupledMALA(model, h)


def _single_step(kernel, state: CoupledState, rng) -> CoupledState:
    x, y, met = kernel.coupled_step(
        state.x[None], state.y[None], np.array([state.met]), as_streams(rng), np.array([0])
    )
    return CoupledState(x[0], y[0], bool(met[0]))


def coupled_rwm_step(model: TargetModel, state: CoupledState, cfg: KernelConfig, rng) -> CoupledState:
    if state.x.shape != (model.dim,):
        raise ValueError(f"state dimension {state.x.shape} does not match model dim {model.dim}")
    return _single_step(CoupledRWM(model, cfg.resolved_step_size(model.dim)), state, rng)


def coupled_mala_step(model: TargetModel, state: CoupledState, cfg: KernelConfig, rng) -> CoupledState:
    if state.x.shape != (model.dim,):
        raise ValueError(f"state dimension {state.x.shape} does not match model dim {model.dim}")
    return _single_step(CoupledMALA(model, cfg.resolved_step_size(model.dim)), state, rng)


def gaussian_init(mean, std: float, dim: int) -> InitSampler:
    """Initial distribution N(mean, std^2 I) drawn through the lane streams."""
    mean = np.broadcast_to(np.asarray(mean, dtype=float), (dim,)).copy()

    def sample(streams, lanes):
        return mean + std * streams.normal(lanes, dim)

    return sample


def run_coupled_lanes(
    kernel,
    init_sampler: InitSampler,
    k: int,
    m: int,
    streams,
    max_iterations: int,
) -> list[CoupledTrajectory]:
    """Simulate one coupled trajectory per lane of ``streams``.

    Each lane is recorded up to ``T = max(m, tau)``. Lanes that have not met
    after ``max_iterations`` coupled steps are stopped with ``tau=None``.
    """
    if not 0 <= k <= m:
        raise ValueError(f"need 0 <= k <= m, got k={k}, m={m}")
    n = len(streams)
    lanes = np.arange(n)
    x0 = np.asarray(init_sampler(streams, lanes), dtype=float)
    y0 = np.asarray(init_sampler(streams, lanes), dtype=float)
    x = kernel.step(x0, streams, lanes)
    y = y0
    xs, ys = [x0, x], [y0]
    met = np.all(x == y, axis=1)
    tau = np.where(met, 1, -1)
    stop = np.full(n, -1)
    y = np.where(met[:, None], x, y)
    t = 1
    while True:
        active = (stop < 0) & ~(met & (t >= m))
        overdue = active & ~met & (t >= max_iterations)
        stop[overdue] = t
        active &= ~overdue
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        xa, ya, ma = kernel.coupled_step(x[idx], y[idx], met[idx], streams, idx)
        x, y = x.copy(), y.copy()
        x[idx], y[idx] = xa, ya
        newly = idx[ma & ~met[idx]]
        tau[newly] = t + 1
        met[idx] = ma
        xs.append(x)
        ys.append(y)
        t += 1
    X = np.stack(xs, axis=1)
    Y = np.stack(ys, axis=1)
    out = []
    for i in range(n):
        if tau[i] > 0:
            T = max(m, int(tau[i]))
            out.append(CoupledTrajectory(X[i, : T + 1].copy(), Y[i, :T].copy(), int(tau[i])))
        else:
            T = int(stop[i])
            out.append(CoupledTrajectory(X[i, : T + 1].copy(), Y[i, :T].copy(), None))
    return out


def run_coupled(model_or_kernel, cfg: KernelConfig, init_sampler: InitSampler, k: int, m: int, rng) -> CoupledTrajectory:
    """Simulate a single coupled trajectory.

    ``model_or_kernel`` is either a :class:`TargetModel` (the kernel is built
    from ``cfg``) or any object following the coupled kernel protocol.
    """
    kernel = make_kernel(model_or_kernel, cfg) if isinstance(model_or_kernel, TargetModel) else model_or_kernel
    return run_coupled_lanes(kernel, init_sampler, k, m, as_streams(rng), cfg.max_iterations)[0]


def long_run_mean(kernel, init_sampler: InitSampler, n_chains: int, n_steps: int, burn_in: int, seed: int):
    """Posterior mean from independent marginal chains run in lockstep.

    Returns ``(mean, standard_error)`` where the standard error is the spread
    of the per-chain averages divided by ``sqrt(n_chains)``.
    """
    streams = SharedStream(make_generator(seed), n_chains)
    lanes = np.arange(n_chains)
    x = np.asarray(init_sampler(streams, lanes), dtype=float)
    for _ in range(burn_in):
        x = kernel.step(x, streams, lanes)
    total = np.zeros_like(x)
    for _ in range(n_steps):
        x = kernel.step(x, streams, lanes)
        total += x
    chain_means = total / n_steps
    return chain_means.mean(axis=0), chain_means.std(axis=0, ddof=1) / math.sqrt(n_chains)
