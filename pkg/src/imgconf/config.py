"""Strict TOML run configuration.

Layout::

    seed = 0                 # root seed; IMGCONF_SEED overrides it

    [dgp]                    # DgpConfig fields except seed
    [model]                  # estimating_kernel_width, n_filters, depth, pool
    [train]                  # TrainConfig fields except seed
    [experiment]             # name, replications, estimators, eta, cross_fit_folds, sweep, grid

Every section is optional. Unknown sections or keys are errors.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .dgp import DgpConfig
from .experiments import ExperimentSpec, ModelConfig
from .model import TrainConfig

SEED_ENV = "IMGCONF_SEED"


class ConfigError(ValueError):
    pass


_MODEL_EXTRA = {"estimating_kernel_width"}
_EXPERIMENT_KEYS = {"name", "replications", "estimators", "eta", "cross_fit_folds", "sweep", "grid"}


@dataclass(frozen=True)
class RunConfig:
    seed: int
    dgp: DgpConfig
    model: ModelConfig
    train: TrainConfig
    estimating_kernel_width: int
    experiment: dict[str, Any]

    def spec(self) -> ExperimentSpec:
        exp = dict(self.experiment)
        for key in ("estimators", "grid"):
            if key in exp:
                exp[key] = tuple(exp[key])
        try:
            return ExperimentSpec(
                dgp=self.dgp, model=self.model, train=self.train,
                estimating_kernel_width=self.estimating_kernel_width, **exp,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[experiment]: {exc}") from exc

    def canonical(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "dgp": dataclasses.asdict(self.dgp),
            "model": {**dataclasses.asdict(self.model), "estimating_kernel_width": self.estimating_kernel_width},
            "train": dataclasses.asdict(self.train),
            "experiment": {k: list(v) if isinstance(v, (list, tuple)) else v for k, v in self.experiment.items()},
        }

    def hash(self) -> str:
        """sha256 of the resolved config; independent of key order in the source file."""
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _check_value(section: str, key: str, value: Any, default: Any) -> Any:
    where = f"[{section}] {key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value


def _build(section: str, cls, table: dict, forbidden: set[str], extra: set[str] = frozenset()):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    defaults = cls()
    kwargs, extras = {}, {}
    for key, value in table.items():
        if key in extra:
            extras[key] = value
            continue
        if key not in fields or key in forbidden:
            hint = " (set the top-level seed instead)" if key == "seed" else ""
            raise ConfigError(f"[{section}]: unknown key {key!r}{hint}")
        kwargs[key] = _check_value(section, key, value, getattr(defaults, key))
    return kwargs, extras


def parse_config(text: str, env: dict[str, str] | None = None) -> RunConfig:
    env = os.environ if env is None else env
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    allowed = {"seed", "dgp", "model", "train", "experiment"}
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"unknown top-level key or section {key!r}")
    for key in ("dgp", "model", "train", "experiment"):
        if key in doc and not isinstance(doc[key], dict):
            raise ConfigError(f"{key!r} must be a section")
    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed: expected a nonnegative integer, got {seed!r}")
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from exc

    dgp_kw, _ = _build("dgp", DgpConfig, doc.get("dgp", {}), {"seed"})
    train_kw, _ = _build("train", TrainConfig, doc.get("train", {}), {"seed"})
    model_kw, model_extra = _build("model", ModelConfig, doc.get("model", {}), set(), _MODEL_EXTRA)
    experiment = dict(doc.get("experiment", {}))
    for key in experiment:
        if key not in _EXPERIMENT_KEYS:
            raise ConfigError(f"[experiment]: unknown key {key!r}")
    z_est = model_extra.get("estimating_kernel_width", ExperimentSpec.estimating_kernel_width)
    if isinstance(z_est, bool) or not isinstance(z_est, int):
        raise ConfigError(f"[model] estimating_kernel_width: expected an integer, got {z_est!r}")

    try:
        dgp_cfg = DgpConfig(seed=seed, **dgp_kw)
    except ValueError as exc:
        raise ConfigError(f"[dgp]: {exc}") from exc
    try:
        train_cfg = TrainConfig(seed=seed, **train_kw)
    except ValueError as exc:
        raise ConfigError(f"[train]: {exc}") from exc
    try:
        model_cfg = ModelConfig(**model_kw)
    except ValueError as exc:
        raise ConfigError(f"[model]: {exc}") from exc
    cfg = RunConfig(seed, dgp_cfg, model_cfg, train_cfg, z_est, experiment)
    cfg.spec()  # validate the cross-section constraints now
    return cfg


def load_config(path: str | Path, env: dict[str, str] | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, env)
