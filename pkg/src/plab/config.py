"""Plain ``key = value`` experiment configuration.

One setting per line, ``#`` starts a comment, blank lines are ignored.
Unknown keys and malformed values are rejected with the offending line
number. :func:`format_config` writes every field, so a snapshot re-parses
to an equal config.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .continual.learners import ALGORITHMS, CbpConfig, LearnerConfig, SnpConfig
from .errors import InvalidInputError
from .regularizers import ErankConfig

ENVIRONMENTS = ("permuted_mnist", "synthetic", "toy")


class ConfigError(InvalidInputError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


@dataclass
class ExperimentConfig:
    environment: str = "synthetic"
    agent: str = "bp"
    # optimisation
    lr: float = 0.3
    momentum: float = 0.0
    weight_decay: float = 0.0
    max_grad_norm: float = 0.0
    mini_batch_size: int = 16
    # effective-rank step
    er_lr: float = 1e-3
    er_batch: int = 128
    er_step: int = 8
    # continual backprop and shrink-and-perturb
    replacement_rate: float = 1e-4
    decay_rate: float = 0.99
    maturity_threshold: int = 100
    shrink: float = 0.9
    perturb_scale: float = 1e-5
    # network and tasks
    hidden: str = "100,100"
    num_tasks: int = 50
    samples_per_task: int = 5000
    eval_size: int = 1000
    steps_per_task: int = 0  # 0 means one pass over the task's training set
    synthetic_dim: int = 20
    synthetic_classes: int = 5
    data_path: str = ""
    seed: int = 0
    n_seeds: int = 1
    # measurements
    dead_census: bool = True
    compute_hessian: bool = False
    compute_hessian_interval: int = 5
    compute_hessian_size: int = 500
    slq_m: int = 40
    slq_probes: int = 2
    slq_sigma2: float = 0.0  # 0 selects the range-based default
    epsilon: float = 0.1
    timing: bool = False
    save_params: bool = False
    # toy environment
    toy_steps: int = 4000
    toy_eta: float = 0.01
    toy_x0: float = -0.4
    toy_y0: float = 0.2
    toy_threshold: float = 0.05
    output_dir: str = "runs/default"

    def __post_init__(self):
        validate(self)

    def hidden_dims(self) -> tuple[int, ...]:
        if not self.hidden.strip():
            return ()
        return tuple(int(h) for h in self.hidden.split(","))

    def learner_config(self) -> LearnerConfig:
        return LearnerConfig(
            algorithm=self.agent,
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            max_grad_norm=self.max_grad_norm,
            batch_size=self.mini_batch_size,
            erank=ErankConfig(er_lr=self.er_lr, update_interval=self.er_step,
                              er_batch=self.er_batch),
            cbp=CbpConfig(self.replacement_rate, self.decay_rate, self.maturity_threshold),
            snp=SnpConfig(self.shrink, self.perturb_scale),
        )

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def validate(cfg: ExperimentConfig) -> None:
    if cfg.environment not in ENVIRONMENTS:
        raise ConfigError(f"environment must be one of {ENVIRONMENTS}")
    if cfg.agent not in ALGORITHMS:
        raise ConfigError(f"agent must be one of {ALGORITHMS}")
    try:
        dims = cfg.hidden_dims()
    except ValueError:
        raise ConfigError("hidden must be a comma-separated list of widths") from None
    if any(h < 1 for h in dims):
        raise ConfigError("hidden widths must be >= 1")
    positive = ("lr", "mini_batch_size", "er_step", "er_batch", "num_tasks", "samples_per_task",
                "eval_size", "n_seeds", "compute_hessian_interval", "compute_hessian_size",
                "slq_m", "slq_probes", "epsilon", "synthetic_dim", "synthetic_classes",
                "toy_steps", "toy_eta")
    for name in positive:
        if getattr(cfg, name) <= 0:
            raise ConfigError(f"{name} must be positive")
    non_negative = ("momentum", "weight_decay", "max_grad_norm", "er_lr", "replacement_rate",
                    "steps_per_task", "slq_sigma2", "perturb_scale", "maturity_threshold")
    for name in non_negative:
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must be non-negative")
    if not 0 <= cfg.momentum < 1:
        raise ConfigError("momentum must lie in [0, 1)")


_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}


def coerce_value(kind, raw: str):
    if kind is bool or kind == "bool":
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind is int or kind == "int":
        return int(raw)
    if kind is float or kind == "float":
        return float(raw)
    return raw


def parse_config(text: str) -> ExperimentConfig:
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    values: dict = {}
    lines: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got {body!r}", lineno)
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in types:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        try:
            values[key] = coerce_value(types[key], raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", lineno) from None
        lines[key] = lineno
    try:
        return ExperimentConfig(**values)
    except ConfigError as exc:
        # point at the line of the offending key when the message names one
        for key, lineno in lines.items():
            if str(exc).startswith(key + " "):
                raise ConfigError(str(exc), lineno) from None
        raise


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n" for f in fields(cfg))
