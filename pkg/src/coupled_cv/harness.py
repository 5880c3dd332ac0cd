"""Experiment orchestration: replicate, fit control variates, estimate, write CSVs.

Protocol for one run with R replicates:

1. Simulate R coupled trajectories (replicate ``r`` seeded from
   ``(root_seed, r)``) and compute ``H_{k:m}`` of every coordinate and every
   score component on each.
2. Fit one Stein control variate per coordinate on replicates
   ``0..floor(R/2)-1``.
3. Report estimates for every strategy on the held-out replicates
   ``floor(R/2)..R-1``, so all strategies share seeds. With no control
   variate requested, all R replicates are reported.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .estimator import NonMeetingError, h_km_vector, pi_hat, sigma_hat_full, simulate_replicates, EstimateBatch
from .kernels import KernelConfig, gaussian_init, make_kernel
from .oracle import (
    FiniteChain,
    FiniteTrajectorySource,
    exact_d_bound_decomposition,
    exact_lambda,
    exact_moment_bound,
    make_synthetic_coupling,
    second_moment_at_init,
    state_function,
)
from .rkhs import (
    BoundConstants,
    CertificationReport,
    CheckRow,
    KernelSpec,
    bound_rhs,
    certify_appendix_chain,
    certify_main_bound,
    fit_geometric_tail,
    CERTIFIED,
    FAILED,
)
from .rng import replicate_seeds
from .stein import CvFitReport, SteinCoefficients, combine_linear, fit_cv_bound, fit_cv_empirical, variance_reduction_factor
from .targets import RegressionData, make_gaussian, make_logistic_regression, synthetic_logistic_data

log = logging.getLogger(__name__)

ESTIMATE_HEADER = ["replicate", "coordinate", "strategy", "estimate", "tau"]
SUMMARY_HEADER = ["coordinate", "strategy", "mean", "variance", "vr_factor"]
CVFIT_HEADER = ["coordinate", "approach", "objective_before", "objective_after", "theta_norm"]
MEETING_HEADER = ["replicate", "tau"]


@dataclass
class RunReport:
    estimates: list = field(default_factory=list)
    summary: list = field(default_factory=list)
    cvfits: list = field(default_factory=list)
    meeting_times: list = field(default_factory=list)
    thetas: dict = field(default_factory=dict)
    fit_replicates: list = field(default_factory=list)
    eval_replicates: list = field(default_factory=list)
    wall_clock: float = 0.0

    def tau_summary(self) -> dict:
        taus = [t for _, t in self.meeting_times if t is not None]
        if not taus:
            return {}
        return {"min": int(min(taus)), "median": float(np.median(taus)), "max": int(max(taus))}

    def summary_for(self, coordinate: int, strategy: str) -> dict:
        for row in self.summary:
            if row[0] == coordinate and row[1] == strategy:
                return dict(zip(SUMMARY_HEADER, row))
        raise KeyError((coordinate, strategy))

    def estimates_for(self, coordinate: int, strategy: str) -> np.ndarray:
        return np.array([r[3] for r in self.estimates if r[1] == coordinate and r[2] == strategy])


def build_target(cfg: ExperimentConfig):
    t = cfg.target
    if t.type == "gaussian":
        mean = np.zeros(t.dim) if t.mean is None else np.asarray(t.mean, dtype=float)
        cov = np.eye(t.dim) if t.covariance is None else np.asarray(t.covariance, dtype=float)
        if mean.shape != (t.dim,):
            raise ValueError(f"target.mean has length {mean.size}, expected target.dim={t.dim}")
        return make_gaussian(mean, cov)
    if t.data_path:
        data = RegressionData.from_csv(t.data_path)
        if data.p != t.dim:
            raise ValueError(f"{t.data_path} has {data.p} feature columns but target.dim={t.dim}")
    else:
        data = synthetic_logistic_data(t.n_obs, t.dim, t.data_seed)
    return make_logistic_regression(data, t.prior_variance)


def kernel_config(cfg: ExperimentConfig) -> KernelConfig:
    return KernelConfig(cfg.kernel.kind, cfg.kernel.step_size, cfg.kernel.max_iterations)


def _require_estimator(cfg: ExperimentConfig):
    if cfg.estimator is None:
        raise ValueError("config has no [estimator] section (k, m, R are required)")
    return cfg.estimator


def _record_fn(model, k, m, keep_samples):
    def components(points):
        return np.concatenate([points, model.score(points)], axis=-1)

    def post(traj):
        if traj.tau is None:
            return None
        est = h_km_vector(traj, components, k, m)
        window = traj.xs[k : m + 1].copy() if keep_samples else None
        return {"tau": traj.tau, "estimates": est, "window": window, "x0": traj.xs[0].copy()}

    return post


def _simulate(cfg: ExperimentConfig, workers: int, out_dir: Path | None):
    est = _require_estimator(cfg)
    model = build_target(cfg)
    kcfg = kernel_config(cfg)
    kernel = make_kernel(model, kcfg)
    init = gaussian_init(cfg.target.init_mean, cfg.target.init_std, model.dim)
    seeds = replicate_seeds(cfg.run.root_seed, est.R)
    keep = cfg.cv.approach in ("bound", "both")
    records = simulate_replicates(
        kernel, init, est.k, est.m, seeds, kcfg.max_iterations, workers, _record_fn(model, est.k, est.m, keep)
    )
    failed = [i for i, r in enumerate(records) if r is None]
    if failed:
        if out_dir is not None:
            partial = RunReport(meeting_times=[(i, None if r is None else r["tau"]) for i, r in enumerate(records)])
            emit_outputs(partial, out_dir)
        raise NonMeetingError(failed)
    return model, records


def _batches(records, d, k, m):
    comps = []
    for j in range(2 * d):
        label = f"x{j + 1}" if j < d else f"score{j - d + 1}"
        comps.append(EstimateBatch([r["estimates"][j] for r in records], k, m, label))
    return comps[:d], comps[d:]


def _fit(cfg, model, records, h_batches, s_batches):
    """Per-coordinate CV fits on the first half; returns {(coord, approach): CvFitReport}."""
    approach = cfg.cv.approach
    R = len(records)
    half = R // 2
    fits = {}
    if approach == "none":
        return fits
    consts = BoundConstants(eta=cfg.cv.eta, lam=cfg.cv.lam, gamma=cfg.cv.gamma)
    kernel = KernelSpec(cfg.cv.bandwidth)
    if approach in ("bound", "both"):
        pi_samples = np.concatenate([records[r]["window"] for r in range(half)])
        x0_samples = np.stack([records[r]["x0"] for r in range(half)])
    d = model.dim
    for i in range(d):
        coord = i + 1
        if approach in ("empirical", "both"):
            fits[(coord, "empirical")] = fit_cv_empirical(
                h_batches[i],
                s_batches,
                ridge_scale=cfg.cv.ridge_scale,
                solver=cfg.cv.solver,
                unbiased_split=cfg.cv.unbiased_split,
            )
        if approach in ("bound", "both"):
            init = fits[(coord, "empirical")].theta if approach == "both" else SteinCoefficients.zeros(d)

            def h(points, i=i):
                return points[..., i]

            fits[(coord, "bound")] = fit_cv_bound(
                h,
                init,
                pi_samples,
                x0_samples,
                consts,
                kernel,
                score=model.score,
                ridge=cfg.cv.ridge,
                norm_points=cfg.cv.norm_points,
            )
    return fits


def run_experiment(cfg: ExperimentConfig, workers: int | None = None, out_dir: str | Path | None = None) -> RunReport:
    start = time.perf_counter()
    workers = cfg.run.workers if workers is None else workers
    est = _require_estimator(cfg)
    model, records = _simulate(cfg, workers, Path(out_dir) if out_dir is not None else None)
    d = model.dim
    h_batches, s_batches = _batches(records, d, est.k, est.m)
    R = est.R
    report = RunReport(meeting_times=[(i, r["tau"]) for i, r in enumerate(records)])
    if cfg.cv.approach == "none":
        eval_rows = list(range(R))
        strategies = ["none"]
    else:
        eval_rows = list(range(R // 2, R))
        report.fit_replicates = list(range(R // 2))
        strategies = ["none"] + (["empirical", "bound"] if cfg.cv.approach == "both" else [cfg.cv.approach])
    report.eval_replicates = eval_rows
    fits = _fit(cfg, model, records, h_batches, s_batches)
    for i in range(d):
        coord = i + 1
        held_h = h_batches[i].subset(eval_rows)
        held_s = [b.subset(eval_rows) for b in s_batches]
        batches = {"none": held_h}
        for strat in strategies[1:]:
            fit = fits[(coord, strat)]
            report.thetas[(coord, strat)] = fit.theta.theta
            report.cvfits.append(fit.csv_row(coord))
            batches[strat] = combine_linear(held_h, held_s, fit.theta)
        for strat in strategies:
            b = batches[strat]
            for rid, e in zip(b.replicate_ids, b.estimates):
                report.estimates.append((rid, coord, strat, e.value, e.tau))
        for strat in strategies:
            b = batches[strat]
            var = sigma_hat_full(b) if len(b) >= 2 else math.nan
            vr = 1.0 if strat == "none" else variance_reduction_factor(batches["none"], b)
            report.summary.append((coord, strat, pi_hat(b), var, vr))
    report.wall_clock = time.perf_counter() - start
    log.info("run finished in %.2fs; meeting times %s", report.wall_clock, report.tau_summary())
    return report


def fit_only(cfg: ExperimentConfig, workers: int | None = None) -> dict:
    workers = cfg.run.workers if workers is None else workers
    est = _require_estimator(cfg)
    if cfg.cv.approach == "none":
        raise ValueError("cv.approach is 'none'; nothing to fit")
    model, records = _simulate(cfg, workers, None)
    h_batches, s_batches = _batches(records, model.dim, est.k, est.m)
    return _fit(cfg, model, records, h_batches, s_batches)


def meeting_times(cfg: ExperimentConfig, workers: int | None = None):
    workers = cfg.run.workers if workers is None else workers
    _, records = _simulate(cfg, workers, None)
    taus = [r["tau"] for r in records]
    fit = fit_geometric_tail(taus) if len(taus) >= 100 else None
    return taus, fit


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def _write_csv(path: Path, header, rows) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_cell(v) for v in row])
    except OSError as exc:
        raise OSError(f"failed to write {path}: {exc}") from exc


def emit_outputs(report: RunReport, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    files = {
        "estimates.csv": (ESTIMATE_HEADER, report.estimates),
        "summary.csv": (SUMMARY_HEADER, report.summary),
        "cvfit.csv": (CVFIT_HEADER, report.cvfits),
        "meeting_times.csv": (MEETING_HEADER, report.meeting_times),
    }
    paths = []
    for name, (header, rows) in files.items():
        _write_csv(out / name, header, rows)
        paths.append(out / name)
    return paths


# ---------------------------------------------------------------------------
# Certification on the finite oracle
# ---------------------------------------------------------------------------


@dataclass
class CertificationSetup:
    chain: FiniteChain
    source: FiniteTrajectorySource
    consts: BoundConstants
    h_values: np.ndarray
    pi_term: float
    norm_term: float
    lambda_h: float
    rhs: float


def certification_setup(cfg: ExperimentConfig) -> CertificationSetup:
    c = cfg.certification
    if c is None:
        raise ValueError("config has no [certification] section")
    chain = FiniteChain(c.transition, c.init, c.coords)
    h_values = np.asarray(c.h, dtype=float)
    if h_values.shape != (chain.n,):
        raise ValueError(f"certification.h must have one value per state ({chain.n})")
    coupling = make_synthetic_coupling(chain, c.meet_prob)
    delta_exact = 1.0 - c.meet_prob
    C = coupling.envelope_constant(delta_exact)
    delta = delta_exact * c.delta_factor
    if not 0 < delta < 1:
        raise ValueError(f"scaled delta {delta} is outside (0, 1)")
    D = exact_moment_bound(chain, h_values, c.eta)
    # the bound needs lambda >= lambda_H, which holds for the sup-norm distance
    lam = exact_lambda(chain, sup_norm=True)
    pi_term, norm_term, lam_h = exact_d_bound_decomposition(chain, h_values, c.eta, KernelSpec(c.bandwidth))
    consts = BoundConstants(eta=c.eta, C=C, delta=delta, D=D, lam=lam)
    rhs = bound_rhs(None, norm_term, second_moment_at_init(chain, h_values), consts, pi_moment=pi_term)
    log.info("certification constants: C=%g delta=%g D=%g lambda=%g lambda_H=%g gamma=%g", C, delta, D, lam, lam_h, consts.gamma)
    return CertificationSetup(chain, FiniteTrajectorySource(coupling), consts, h_values, pi_term, norm_term, lam_h, rhs)


def run_certification(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> CertificationReport:
    """All appendix checks plus the main bound on the configured oracle chain.

    Writes ``certification.csv`` into ``out_dir`` (default ``run.out_dir``).
    """
    c = cfg.certification
    setup = certification_setup(cfg)
    h = state_function(setup.h_values)
    seed = cfg.run.root_seed
    report = certify_appendix_chain(
        setup.source,
        h,
        setup.consts,
        c.t_max,
        c.n_mc,
        n_values=tuple(c.n_values),
        n_prime_max=c.n_prime_max,
        seed=seed,
    )
    d_total = setup.pi_term + setup.norm_term * setup.lambda_h
    report.rows.append(
        CheckRow("d_decomposition", "sup", setup.consts.D, d_total, CERTIFIED if setup.consts.D <= d_total * (1 + 1e-12) else FAILED)
    )
    report.rows.append(
        CheckRow("lambda_h_le_tv", "sup", setup.lambda_h, setup.consts.lam, CERTIFIED if setup.lambda_h <= setup.consts.lam + 1e-12 else FAILED)
    )
    trajs = setup.source.trajectories(c.main_replicates, 0, 0, seed + 1)
    batch = EstimateBatch([h_km_vector(tr, h, 0, 0)[0] for tr in trajs], 0, 0, "h")
    report.extend(certify_main_bound(batch, setup.rhs))
    out = Path(out_dir if out_dir is not None else cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "certification.csv")
    return report
