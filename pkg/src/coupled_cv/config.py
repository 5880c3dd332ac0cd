"""TOML experiment configuration.

Sections: ``target``, ``kernel``, ``estimator``, ``cv``, ``run`` and
``certification``. Unknown sections or keys are rejected; every default that
gets applied is logged.
"""

from __future__ import annotations

import logging
import sys
from dataclasses import MISSING, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class TargetSection:
    type: str = "gaussian"
    dim: int = 1
    mean: list | None = None
    covariance: list | None = None
    data_path: str | None = None
    n_obs: int = 100
    data_seed: int = 0
    prior_variance: float = 10.0
    init_mean: float = 0.0
    init_std: float = 1.0


@dataclass
class KernelSection:
    kind: str = "coupled_rwm"
    step_size: float | None = None
    max_iterations: int = 100_000


@dataclass
class EstimatorSection:
    k: int = field(default=MISSING)
    m: int = field(default=MISSING)
    R: int = field(default=MISSING)


@dataclass
class CvSection:
    approach: str = "none"
    eta: float = 0.1
    # "lambda" in the file
    lam: float = 1e-3
    gamma: float = 1e3
    bandwidth: float = 1.0
    ridge: float = 1e-10
    ridge_scale: float = 1e-8
    norm_points: int = 200
    solver: str = "closed_form"
    unbiased_split: bool = False


@dataclass
class RunSection:
    root_seed: int = 0
    workers: int = 1
    out_dir: str = "out"


@dataclass
class CertificationSection:
    transition: list = field(default_factory=lambda: [[0.5, 0.5], [0.5, 0.5]])
    init: list = field(default_factory=lambda: [1.0, 0.0])
    h: list = field(default_factory=lambda: [0.0, 1.0])
    coords: list | None = None
    eta: float = 2.0
    meet_prob: float = 0.5
    delta_factor: float = 1.0
    t_max: int = 20
    n_values: list = field(default_factory=lambda: [0, 2, 5])
    n_prime_max: int = 30
    n_mc: int = 100_000
    main_replicates: int = 100_000
    bandwidth: float = 1.0


@dataclass
class ExperimentConfig:
    target: TargetSection = field(default_factory=TargetSection)
    kernel: KernelSection = field(default_factory=KernelSection)
    estimator: EstimatorSection | None = None
    cv: CvSection = field(default_factory=CvSection)
    run: RunSection = field(default_factory=RunSection)
    certification: CertificationSection | None = None
    source: str | None = None


_SECTIONS = {
    "target": TargetSection,
    "kernel": KernelSection,
    "estimator": EstimatorSection,
    "cv": CvSection,
    "run": RunSection,
    "certification": CertificationSection,
}
_RENAMES = {("cv", "lambda"): "lam"}
_APPROACHES = ("none", "empirical", "bound", "both")
# stand-in defaults that carry the expected type of a required or optional field
_TYPE_EXEMPLARS = {"int": 0, "float": 0.0, "bool": False, "float | None": 0.0}


def _coerce(section: str, key: str, value, default):
    name = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number")
        return float(value)
    return value


def _build_section(name: str, cls, table: dict):
    if not isinstance(table, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name: f for f in fields(cls)}
    internal_only = {a for (s, _), a in _RENAMES.items() if s == name}
    kwargs = {}
    for key, value in table.items():
        attr = _RENAMES.get((name, key), key)
        if attr not in known or (key == attr and attr in internal_only):
            raise ConfigError(f"unknown key {name}.{key}")
        f = known[attr]
        default = f.default if f.default is not MISSING else None
        if f.default is MISSING and f.default_factory is not MISSING:
            default = f.default_factory()
        if default is None:
            default = _TYPE_EXEMPLARS.get(f.type, value)
        kwargs[attr] = _coerce(name, key, value, default)
    for attr, f in known.items():
        if attr in kwargs:
            continue
        file_key = next((k for (s, k), a in _RENAMES.items() if s == name and a == attr), attr)
        if f.default is MISSING and f.default_factory is MISSING:
            raise ConfigError(f"missing required key {name}.{file_key}")
        value = f.default if f.default is not MISSING else f.default_factory()
        log.info("config default applied: %s.%s = %r", name, file_key, value)
    return cls(**kwargs)


def config_from_dict(data: dict, source: str | None = None) -> ExperimentConfig:
    for name in data:
        if name not in _SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
    sections = {}
    for name, cls in _SECTIONS.items():
        if name in data:
            sections[name] = _build_section(name, cls, data[name])
        elif name in ("estimator", "certification"):
            sections[name] = None
        else:
            log.info("config default applied: [%s] section with all defaults", name)
            sections[name] = cls()
    cfg = ExperimentConfig(**sections, source=source)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    t = cfg.target
    if t.type not in ("gaussian", "logistic"):
        raise ConfigError(f"target.type must be 'gaussian' or 'logistic', got {t.type!r}")
    if t.dim < 1:
        raise ConfigError("target.dim must be positive")
    if t.prior_variance <= 0:
        raise ConfigError("target.prior_variance must be positive")
    if t.init_std <= 0:
        raise ConfigError("target.init_std must be positive")
    if cfg.kernel.kind not in ("coupled_rwm", "coupled_mala"):
        raise ConfigError(f"kernel.kind must be coupled_rwm or coupled_mala, got {cfg.kernel.kind!r}")
    if cfg.kernel.step_size is not None and cfg.kernel.step_size <= 0:
        raise ConfigError("kernel.step_size must be positive")
    if cfg.kernel.max_iterations < 1:
        raise ConfigError("kernel.max_iterations must be positive")
    if cfg.cv.approach not in _APPROACHES:
        raise ConfigError(f"cv.approach must be one of {_APPROACHES}, got {cfg.cv.approach!r}")
    if cfg.cv.solver not in ("closed_form", "iterative"):
        raise ConfigError("cv.solver must be closed_form or iterative")
    if cfg.cv.eta < 0 or cfg.cv.lam < 0 or cfg.cv.gamma < 0:
        raise ConfigError("cv.eta, cv.lambda and cv.gamma must be nonnegative")
    if cfg.cv.bandwidth <= 0:
        raise ConfigError("cv.bandwidth must be positive")
    e = cfg.estimator
    if e is not None:
        if e.k < 0:
            raise ConfigError("estimator.k must be nonnegative")
        if e.m < e.k:
            raise ConfigError(f"estimator.m must be >= estimator.k (got m={e.m}, k={e.k})")
        if e.R < 2:
            raise ConfigError("estimator.R must be at least 2")
        if cfg.cv.approach != "none" and e.R < 4:
            raise ConfigError("estimator.R must be at least 4 when a cv approach is enabled")
    if cfg.run.workers < 1:
        raise ConfigError("run.workers must be at least 1")
    c = cfg.certification
    if c is not None:
        if not 0 < c.meet_prob < 1:
            raise ConfigError("certification.meet_prob must lie in (0, 1)")
        if c.delta_factor <= 0:
            raise ConfigError("certification.delta_factor must be positive")
        if c.eta <= 0:
            raise ConfigError("certification.eta must be positive")
        if c.n_mc < 2 or c.main_replicates < 2:
            raise ConfigError("certification.n_mc and certification.main_replicates must be at least 2")


def parse_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data, source=str(path))
