"""Exact computations on finite-state Markov chains.

States are integers ``0..n-1``. Inside the generic trajectory engine a state
is stored as a float array of shape ``(n_lanes, 1)`` holding the index, so
finite chains run through the same estimator code as continuous targets.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kernels import run_coupled_lanes
from .rkhs import InterpolantNorm, KernelSpec, embedding_distance, gram
from .rng import SharedStream, make_generator, replicate_seed

TV_CONVERGED = 1e-12


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class FiniteChain:
    transition: np.ndarray
    init: np.ndarray
    coords: np.ndarray | None = None
    stationary: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.transition, dtype=float))
        init = np.asarray(self.init, dtype=float).reshape(-1)
        n = P.shape[0]
        if P.shape != (n, n):
            raise ValueError("transition matrix must be square")
        if np.any(P < 0) or np.any(P > 1):
            raise ValueError("transition probabilities must lie in [0, 1]")
        if np.max(np.abs(P.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("rows of the transition matrix must sum to 1")
        if init.shape != (n,) or np.any(init < 0) or abs(init.sum() - 1.0) > 1e-10:
            raise ValueError("init must be a probability vector over the states")
        coords = np.arange(n, dtype=float)[:, None] if self.coords is None else np.asarray(self.coords, dtype=float)
        if coords.ndim == 1:
            coords = coords[:, None]
        if coords.shape[0] != n or len({tuple(c) for c in coords}) != n:
            raise ValueError("coords must embed the states as distinct points")
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "init", init)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "stationary", _stationary(P))

    @property
    def n(self) -> int:
        return self.transition.shape[0]

    def laws(self, t_max: int) -> np.ndarray:
        """Rows ``pi_0 P^t`` for ``t = 0..t_max``."""
        out = np.empty((t_max + 1, self.n))
        out[0] = self.init
        for t in range(1, t_max + 1):
            out[t] = out[t - 1] @ self.transition
        return out

    @classmethod
    def from_text(cls, path: str | Path) -> "FiniteChain":
        """Whitespace-separated transition rows followed by one init-vector line."""
        lines = [ln.split() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
        rows = np.array([[float(v) for v in ln] for ln in lines], dtype=float)
        return cls(transition=rows[:-1], init=rows[-1])


def _stationary(P: np.ndarray) -> np.ndarray:
    n = P.shape[0]
    A = P.T - np.eye(n)
    A[-1] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    pi = np.linalg.solve(A, b)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def state_function(values) -> callable:
    """Integrand on finite states: ``h(points) = values[index]``."""
    values = np.asarray(values, dtype=float)

    def h(points):
        return values[np.asarray(points)[..., 0].astype(int)]

    return h


def exact_tv(p, q) -> float:
    """Total variation as half the L1 distance, so disjoint laws are at distance 1."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError("probability vectors differ in length")
    for v in (p, q):
        if abs(v.sum() - 1.0) > 1e-10:
            raise ValueError("probability vectors must sum to 1")
    return 0.5 * float(np.abs(p - q).sum())


def _converged_laws(chain: FiniteChain, t_max: int) -> np.ndarray:
    laws = chain.laws(t_max)
    if 0.5 * np.abs(laws[-1] - chain.stationary).sum() >= TV_CONVERGED:
        raise ConvergenceError(f"d_TV(pi, pi_t) has not fallen below {TV_CONVERGED} by t_max={t_max}")
    return laws


def tv_sup_norm(p, q) -> float:
    """``sup_{|f| <= 1} |p(f) - q(f)|``, the full L1 distance (twice :func:`exact_tv`).

    This is the distance that dominates the kernel distance whenever
    ``K(x, x) <= 1``; the half-L1 version does not.
    """
    return 2.0 * exact_tv(p, q)


def exact_lambda(chain: FiniteChain, t_max: int = 10_000, sup_norm: bool = False) -> float:
    """``sup_t d_TV(pi, pi_0 P^t)`` by enumeration over ``t = 0..t_max``.

    Half-L1 by default; ``sup_norm=True`` uses :func:`tv_sup_norm`.
    """
    laws = _converged_laws(chain, t_max)
    scale = 1.0 if sup_norm else 0.5
    return float(scale * np.abs(laws - chain.stationary).sum(axis=1).max())


def exact_asymptotic_variance(chain: FiniteChain, h) -> float:
    """MCMC asymptotic variance via the fundamental matrix ``(I - P + 1 pi^T)^{-1}``."""
    P, pi = chain.transition, chain.stationary
    h = np.asarray(h, dtype=float)
    hc = h - pi @ h
    Z = np.linalg.inv(np.eye(chain.n) - P + np.outer(np.ones(chain.n), pi))
    return float(2.0 * pi @ (hc * (Z @ hc)) - pi @ hc**2)


def exact_moment_bound(chain: FiniteChain, h, eta: float, t_max: int = 10_000) -> float:
    """``D = sup_t E|h(X_t)|^(2+eta)`` exactly."""
    f = np.abs(np.asarray(h, dtype=float)) ** (2.0 + eta)
    laws = _converged_laws(chain, t_max)
    return float(max((laws @ f).max(), chain.stationary @ f))


def exact_d_bound_decomposition(chain: FiniteChain, h, eta: float, kernel: KernelSpec, t_max: int = 10_000):
    """``(pi(|h|^(2+eta)), || |h|^(2+eta) ||_H, sup_t d_H(pi, pi_t))`` on the embedded states.

    The RKHS norm is that of the minimum-norm interpolant on the state
    coordinates, which is the norm of the restricted function space.
    """
    f = np.abs(np.asarray(h, dtype=float)) ** (2.0 + eta)
    G = gram(chain.coords, kernel)
    laws = _converged_laws(chain, t_max)
    lam_h = max(embedding_distance(chain.stationary, law, G) for law in laws)
    norm_term = InterpolantNorm(chain.coords, kernel, ridge=0.0)(f) if np.any(f) else 0.0
    return float(chain.stationary @ f), norm_term, lam_h


# ---------------------------------------------------------------------------
# Synthetic coupling with an exact geometric meeting tail
# ---------------------------------------------------------------------------


def _shifted_quantile_coupling(a: np.ndarray, b: np.ndarray, shift: float = 0.5) -> np.ndarray:
    """Joint law of ``(F_a^{-1}(U), F_b^{-1}(U + shift mod 1))`` with U uniform."""
    ca = np.concatenate([[0.0], np.cumsum(a)])
    cb = np.concatenate([[0.0], np.cumsum(b)])
    ca[-1] = cb[-1] = 1.0
    J = np.zeros((a.size, b.size))
    for j in range(b.size):
        lo, hi = cb[j] - shift, cb[j + 1] - shift
        pieces = []
        if lo < 0 and hi <= 0:
            pieces.append((lo + 1, hi + 1))
        elif lo < 0:
            pieces += [(lo + 1, 1.0), (0.0, hi)]
        else:
            pieces.append((lo, hi))
        for i in range(a.size):
            J[i, j] = sum(max(0.0, min(ca[i + 1], u) - max(ca[i], l)) for l, u in pieces)
    return J


@dataclass
class CoupledFiniteKernel:
    """Faithful coupling of two copies of a finite chain.

    ``joint[x*n + y, x'*n + y']`` is the one-step law of the pair. Both
    marginals equal the chain's transition rows; the diagonal is absorbing.
    """

    chain: FiniteChain
    joint: np.ndarray
    meet_prob: float

    def __post_init__(self):
        n = self.chain.n
        self._cum_joint = np.cumsum(self.joint, axis=1)
        self._cum_joint[:, -1] = 1.0
        self._cum_p = np.cumsum(self.chain.transition, axis=1)
        self._cum_p[:, -1] = 1.0
        self._cum_init = np.cumsum(self.chain.init)
        self._cum_init[-1] = 1.0
        self._n = n

    @property
    def exact_geometric(self) -> bool:
        """True when every unmet pair meets with probability exactly ``meet_prob``."""
        n = self._n
        off = ~np.eye(n, dtype=bool)
        return bool(np.all(np.abs(meeting_probability_per_step(self)[off] - self.meet_prob) <= 1e-12))

    def marginals(self) -> tuple[np.ndarray, np.ndarray]:
        n = self._n
        J = self.joint.reshape(n, n, n, n)
        return J.sum(axis=3), J.sum(axis=2)

    # kernel protocol ------------------------------------------------------
    def init_sampler(self, streams, lanes):
        u = streams.uniform(lanes)
        return (self._cum_init[None, :] <= u[:, None]).sum(axis=1).clip(max=self._n - 1)[:, None].astype(float)

    def step(self, x, streams, lanes):
        u = streams.uniform(lanes)
        rows = self._cum_p[x[:, 0].astype(int)]
        return (rows <= u[:, None]).sum(axis=1).clip(max=self._n - 1)[:, None].astype(float)

    def coupled_step(self, x, y, met, streams, lanes):
        n = self._n
        pair = x[:, 0].astype(int) * n + y[:, 0].astype(int)
        u = streams.uniform(lanes)
        nxt = (self._cum_joint[pair] <= u[:, None]).sum(axis=1).clip(max=n * n - 1)
        nx, ny = nxt // n, nxt % n
        new_met = met | (nx == ny)
        return nx[:, None].astype(float), ny[:, None].astype(float), new_met

    # exact quantities -----------------------------------------------------
    def exact_tail(self, t_max: int) -> np.ndarray:
        """``P(tau > t)`` for ``t = 0..t_max`` under the lag-1 construction."""
        n = self._n
        P, init = self.chain.transition, self.chain.init
        mu = np.outer(init @ P, init).reshape(-1)
        off = ~np.eye(n, dtype=bool).reshape(-1)
        out = np.empty(t_max + 1)
        out[0] = 1.0
        for t in range(1, t_max + 1):
            mu = np.where(off, mu, 0.0)
            out[t] = mu.sum()
            mu = mu @ self.joint
        return out

    def envelope_constant(self, delta: float, t_max: int = 200) -> float:
        """Smallest C with ``P(tau > t) <= C delta^t`` for ``t <= t_max``."""
        tail = self.exact_tail(t_max)
        return float(np.max(tail / delta ** np.arange(t_max + 1)))


def _min_diagonal_coupling(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Quantile coupling of ``a`` and ``b`` with the least mass on the diagonal.

    Searches every breakpoint shift of the shifted-quantile coupling and the
    antithetic pairing ``(F_a^{-1}(U), F_b^{-1}(1-U))``. Marginals are exact
    for every candidate; only the diagonal mass differs.
    """
    ca = np.concatenate([[0.0], np.cumsum(a)])
    cb = np.concatenate([[0.0], np.cumsum(b)])
    shifts = np.unique(np.mod(cb[None, :] - ca[:, None], 1.0))
    rev = _shifted_quantile_coupling(a, b[::-1], 0.0)[:, ::-1]  # Y = F_b^{-1}(1 - U) up to null sets
    best = rev
    for shift in shifts:
        J = _shifted_quantile_coupling(a, b, float(shift))
        if np.trace(J) < np.trace(best) - 1e-15:
            best = J
    return best


def make_synthetic_coupling(chain: FiniteChain, meet_prob: float) -> CoupledFiniteKernel:
    """Coupling in which an unmet pair meets with probability at least ``meet_prob`` per step.

    Needs the minorization ``P(x, .) >= meet_prob * nu`` for every x, with
    ``nu`` proportional to the column minima of P. With probability
    ``meet_prob`` both chains jump to a common draw from ``nu``; otherwise they
    move by their residual kernels, coupled to put as little mass as possible
    on the diagonal. When that residual mass is zero for every pair
    (``kernel.exact_geometric``) the meeting probability is exactly
    ``meet_prob`` and ``P(tau > t) = P(X_1 != Y_0) (1 - meet_prob)^(t-1)``.
    """
    if not 0.0 < meet_prob <= 1.0:
        raise ValueError("meet_prob must lie in (0, 1]")
    P = chain.transition
    n = chain.n
    col_min = P.min(axis=0)
    mass = col_min.sum()
    if meet_prob > mass + 1e-12:
        raise ValueError(f"meet_prob={meet_prob} exceeds the minorization mass {mass:.6g} of the chain")
    nu = col_min / mass
    joint = np.zeros((n * n, n * n))
    diag = np.arange(n) * (n + 1)
    for x in range(n):
        for y in range(n):
            row = joint[x * n + y]
            if x == y:
                row[diag] = P[x]
                continue
            row[diag] += meet_prob * nu
            if meet_prob < 1.0:
                rx = np.clip((P[x] - meet_prob * nu) / (1.0 - meet_prob), 0.0, None)
                ry = np.clip((P[y] - meet_prob * nu) / (1.0 - meet_prob), 0.0, None)
                J = _min_diagonal_coupling(rx / rx.sum(), ry / ry.sum())
                row += (1.0 - meet_prob) * J.reshape(-1)
    return CoupledFiniteKernel(chain, joint, meet_prob)


# ---------------------------------------------------------------------------
# Monte Carlo source
# ---------------------------------------------------------------------------


class FiniteTrajectorySource:
    """Coupled finite-chain trajectories with exact premise quantities attached.

    Trajectories are simulated in fixed chunks; chunk ``c`` draws from a
    generator seeded with ``replicate_seed(seed, c)``.
    """

    def __init__(self, kernel: CoupledFiniteKernel, chunk_size: int = 5000, max_iterations: int = 100_000):
        self.kernel = kernel
        self.chunk_size = chunk_size
        self.max_iterations = max_iterations

    def trajectories(self, n: int, k: int, m: int, seed: int):
        out = []
        for c, start in enumerate(range(0, n, self.chunk_size)):
            size = min(self.chunk_size, n - start)
            streams = SharedStream(make_generator(replicate_seed(seed, c)), size)
            out.extend(
                run_coupled_lanes(self.kernel, self.kernel.init_sampler, k, m, streams, self.max_iterations)
            )
        return out

    def exact_tail(self, t_max: int) -> np.ndarray:
        return self.kernel.exact_tail(t_max)

    def exact_moment_sup(self, h, eta: float) -> float:
        values = np.asarray(h(np.arange(self.kernel.chain.n, dtype=float)[:, None]), dtype=float)
        return exact_moment_bound(self.kernel.chain, values, eta)


def second_moment_at_init(chain: FiniteChain, h) -> float:
    h = np.asarray(h, dtype=float)
    return float(chain.init @ h**2)


def meeting_probability_per_step(kernel: CoupledFiniteKernel) -> np.ndarray:
    """Probability that each off-diagonal pair lands on the diagonal in one step."""
    n = kernel.chain.n
    diag = np.arange(n) * (n + 1)
    return kernel.joint[:, diag].sum(axis=1).reshape(n, n)
