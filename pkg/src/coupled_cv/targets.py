"""Differentiable target distributions: log-density plus score.

All evaluators are vectorized over leading axes: a point array of shape
``(..., dim)`` maps to log-densities of shape ``(...)`` and scores of shape
``(..., dim)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.linalg import lapack
from scipy.special import expit

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class TargetModel:
    dim: int
    log_density: Callable[[np.ndarray], np.ndarray]
    score: Callable[[np.ndarray], np.ndarray]
    name: str = "target"

    def check_point(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.dim,):
            raise ValueError(f"point has trailing dimension {x.shape[-1:]} but model dim is {self.dim}")
        return x


@dataclass(frozen=True)
class RegressionData:
    design: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        design = np.asarray(self.design, dtype=float)
        labels = np.asarray(self.labels, dtype=float)
        if design.ndim != 2:
            raise ValueError("design must be a 2-d matrix")
        if labels.shape != (design.shape[0],):
            raise ValueError(f"labels have shape {labels.shape}, expected ({design.shape[0]},)")
        if not np.all(np.isfinite(design)):
            raise ValueError("design contains non-finite entries")
        if not np.all((labels == 0) | (labels == 1)):
            raise ValueError("labels must be 0 or 1")
        object.__setattr__(self, "design", design)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.design.shape[0]

    @property
    def p(self) -> int:
        return self.design.shape[1]

    @classmethod
    def from_csv(cls, path: str | Path) -> "RegressionData":
        """Read a header row, then rows of p features followed by a 0/1 label."""
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or len(header) < 2:
                raise ValueError(f"{path}: expected a header with at least one feature and a label column")
            rows = [r for r in reader if r]
        width = len(header)
        for lineno, r in enumerate(rows, start=2):
            if len(r) != width:
                raise ValueError(f"{path}:{lineno}: expected {width} fields, got {len(r)}")
        table = np.array(rows, dtype=float).reshape(len(rows), width)
        return cls(design=table[:, :-1], labels=table[:, -1])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{j + 1}" for j in range(self.p)] + ["y"])
            for row, y in zip(self.design, self.labels):
                writer.writerow([repr(float(v)) for v in row] + [int(y)])


def synthetic_logistic_data(n: int, p: int, seed: int) -> RegressionData:
    """Standard-normal design, coefficients drawn N(0, 1), Bernoulli labels."""
    rng = np.random.default_rng(seed)
    design = rng.standard_normal((n, p))
    beta = rng.standard_normal(p)
    labels = (rng.random(n) < expit(design @ beta)).astype(float)
    return RegressionData(design=design, labels=labels)


def make_gaussian(mean, covariance) -> TargetModel:
    """Multivariate normal target with its exact normalizing constant."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(covariance, dtype=float))
    d = mean.shape[0]
    if cov.shape != (d, d):
        raise ValueError(f"covariance has shape {cov.shape}, expected ({d}, {d})")
    if not np.allclose(cov, cov.T):
        raise ValueError("covariance is not symmetric")
    chol, info = lapack.dpotrf(cov, lower=1, clean=1)
    if info > 0:
        raise ValueError(f"covariance is not positive definite: Cholesky pivot {info} (1-based) is non-positive")
    if info < 0:
        raise ValueError(f"invalid covariance argument (LAPACK info={info})")
    chol_inv, _ = lapack.dtrtri(chol, lower=1)
    precision = chol_inv.T @ chol_inv
    log_norm = -0.5 * d * LOG_2PI - np.sum(np.log(np.diag(chol)))

    def log_density(x):
        diff = np.asarray(x, dtype=float) - mean
        return log_norm - 0.5 * np.einsum("...i,ij,...j->...", diff, precision, diff)

    def score(x):
        diff = np.asarray(x, dtype=float) - mean
        return -_rowdot(diff, precision)

    return TargetModel(dim=d, log_density=log_density, score=score, name="gaussian")


def _rowdot(a: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``a @ B`` with a reduction order that does not depend on the batch shape of ``a``.

    BLAS picks different kernels for different batch sizes, which changes the
    last bit of the result; that would make outputs depend on how replicates
    are grouped.
    """
    return np.sum(a[..., :, None] * B, axis=-2)


def softplus(z: np.ndarray) -> np.ndarray:
    """log(1 + exp(z)) without overflow."""
    z = np.asarray(z, dtype=float)
    pos = z > 0
    out = np.empty_like(z)
    out[pos] = z[pos] + np.log1p(np.exp(-z[pos]))
    out[~pos] = np.log1p(np.exp(z[~pos]))
    return out


def make_logistic_regression(data: RegressionData, prior_variance: float = 10.0) -> TargetModel:
    """Bayesian logistic regression posterior with an isotropic N(0, prior_variance I) prior.

    The log-density drops all constants, so at beta = 0 it equals -n log 2.
    """
    if not prior_variance > 0:
        raise ValueError("prior_variance must be positive")
    X, y = data.design, data.labels
    p = data.p

    def _check(beta):
        beta = np.asarray(beta, dtype=float)
        if beta.shape[-1:] != (p,):
            raise ValueError(f"beta has trailing dimension {beta.shape[-1:]}, design has {p} columns")
        return beta

    def log_density(beta):
        beta = _check(beta)
        z = _rowdot(beta, X.T)
        return (np.sum(z * y, axis=-1) - softplus(z).sum(axis=-1)) - 0.5 * np.sum(beta * beta, axis=-1) / prior_variance

    def score(beta):
        beta = _check(beta)
        resid = y - expit(_rowdot(beta, X.T))
        return _rowdot(resid, X) - beta / prior_variance

    return TargetModel(dim=p, log_density=log_density, score=score, name="logistic")


def score_matrix(model: TargetModel, points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        return np.empty((0, model.dim))
    pts = model.check_point(np.atleast_2d(pts))
    return np.asarray(model.score(pts), dtype=float).reshape(len(pts), model.dim)
