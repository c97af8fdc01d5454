"""Run configuration shared by the CLI subcommands.

Configs are JSON objects whose keys match the dataclass fields below; tree
parameters use their conventional names (``learning_rate``, ``max_bin``,
``max_leaves``, ``max_depth``, ``min_data_in_leaf``, ``min_split_gain``,
``lambda``). Validation collects every violated bound before raising.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace

from dgbm.boosting import FitConfig
from dgbm.errors import ConfigError, InvalidParameterError
from dgbm.gbt import TreeParams
from dgbm.gbt.tree import tree_param_violations
from dgbm.heads import HEADS, BernsteinFlowHead, GaussianHead

TREE_KEYS = ("learning_rate", "max_bin", "max_leaves", "max_depth", "min_data_in_leaf",
             "min_split_gain", "lambda")


@dataclass
class RunConfig:
    data: str | None = None
    simulate: dict | None = None
    response: str = "y"
    head: str = "gaussian"
    order: int | None = None
    order_grid: list | None = None
    learning_rate: float = 0.1
    max_bin: int = 64
    max_leaves: int = 16
    max_depth: int = 0
    min_data_in_leaf: int = 1
    min_split_gain: float = 0.0
    lambda_: float = 1.0
    boosting_rounds: int = 1000
    hessian_floor: float = 1e-6
    early_stopping: dict | None = None
    n_data_folds: int = 5
    transform: dict = field(default_factory=lambda: {"log": False, "scale": 1.0})
    seed: int = 0
    n_samples: int = 1000
    quantiles: list = field(default_factory=lambda: [0.05, 0.95])
    bands: list = field(default_factory=lambda: [[0.05, 0.95]])
    n_jobs: int = 1
    datasets: list = field(default_factory=list)
    models: list = field(default_factory=list)

    def tree_params(self) -> TreeParams:
        return TreeParams(
            learning_rate=self.learning_rate,
            max_bin=self.max_bin,
            max_leaves=self.max_leaves,
            max_depth=self.max_depth,
            min_data_in_leaf=self.min_data_in_leaf,
            min_split_gain=self.min_split_gain,
            lambda_=self.lambda_,
        )

    def fit_config(self) -> FitConfig:
        es = self.early_stopping or {}
        return FitConfig(
            boosting_rounds=self.boosting_rounds,
            hessian_floor=self.hessian_floor,
            early_stopping_fraction=es.get("fraction"),
            patience=es.get("patience", 20),
            seed=self.seed,
            n_jobs=self.n_jobs,
        )

    def make_head(self, order: int | None = None):
        if self.head == GaussianHead.name:
            return GaussianHead()
        return BernsteinFlowHead(order=order if order is not None else self.order, fit_seed=self.seed)

    def updated(self, overrides: dict) -> "RunConfig":
        """Copy with ``overrides`` applied (config-file key names)."""
        return replace(self, **_normalise(overrides))

    def validate(self) -> "RunConfig":
        problems = validation_problems(self)
        if problems:
            raise ConfigError(problems)
        return self


_FIELD_NAMES = {f.name for f in fields(RunConfig)}


def _normalise(d: dict) -> dict:
    out = {}
    unknown = []
    for k, v in d.items():
        key = "lambda_" if k == "lambda" else k
        if key not in _FIELD_NAMES:
            unknown.append(k)
        out[key] = v
    if unknown:
        raise ConfigError([f"unknown config key {k!r}" for k in unknown])
    return out


def validation_problems(cfg: RunConfig) -> list[str]:
    problems = tree_param_violations(
        {k: getattr(cfg, "lambda_" if k == "lambda" else k) for k in TREE_KEYS}
    )
    if cfg.head not in HEADS:
        problems.append(f"head must be one of {sorted(HEADS)}, got {cfg.head!r}")
    if cfg.head == BernsteinFlowHead.name and cfg.order is None and not cfg.order_grid:
        problems.append("bernstein_flow needs 'order' or 'order_grid'")
    if cfg.order is not None and not (_is_int(cfg.order) and cfg.order >= 1):
        problems.append(f"order must be an integer >= 1, got {cfg.order!r}")
    if cfg.order_grid is not None:
        if not cfg.order_grid or not all(_is_int(m) and m >= 1 for m in cfg.order_grid):
            problems.append(f"order_grid must be a non-empty list of integers >= 1, got {cfg.order_grid!r}")
    if not (_is_int(cfg.boosting_rounds) and cfg.boosting_rounds >= 0):
        problems.append(f"boosting_rounds must be an integer >= 0, got {cfg.boosting_rounds!r}")
    if not (isinstance(cfg.hessian_floor, (int, float)) and cfg.hessian_floor > 0):
        problems.append(f"hessian_floor must be > 0, got {cfg.hessian_floor!r}")
    if not (_is_int(cfg.n_data_folds) and cfg.n_data_folds >= 1):
        problems.append(f"n_data_folds must be an integer >= 1, got {cfg.n_data_folds!r}")
    if not (_is_int(cfg.n_samples) and cfg.n_samples >= 2):
        problems.append(f"n_samples must be an integer >= 2, got {cfg.n_samples!r}")
    if not (_is_int(cfg.n_jobs) and cfg.n_jobs >= 1):
        problems.append(f"n_jobs must be an integer >= 1, got {cfg.n_jobs!r}")
    problems += _level_problems("quantiles", cfg.quantiles)
    for band in cfg.bands or []:
        if not (isinstance(band, (list, tuple)) and len(band) == 2):
            problems.append(f"bands entries must be [lower, upper] pairs, got {band!r}")
        else:
            problems += _level_problems("bands", list(band))
    t = cfg.transform or {}
    if not isinstance(t, dict) or set(t) - {"log", "scale"}:
        problems.append(f"transform must be an object with keys 'log' and 'scale', got {t!r}")
    elif not (isinstance(t.get("scale", 1.0), (int, float)) and t.get("scale", 1.0) > 0):
        problems.append(f"transform.scale must be > 0, got {t.get('scale')!r}")
    es = cfg.early_stopping
    if es is not None:
        frac = es.get("fraction") if isinstance(es, dict) else None
        if frac is None or not 0 < frac < 1:
            problems.append(f"early_stopping.fraction must lie in (0, 1), got {frac!r}")
        if isinstance(es, dict) and not (_is_int(es.get("patience", 20)) and es.get("patience", 20) >= 1):
            problems.append("early_stopping.patience must be an integer >= 1")
    if cfg.simulate is not None:
        n = cfg.simulate.get("n", cfg.simulate.get("n_train"))
        if not (_is_int(n) and n >= 1):
            problems.append(f"simulate.n must be an integer >= 1, got {n!r}")
    return problems


def _level_problems(name, levels) -> list[str]:
    if not isinstance(levels, (list, tuple)) or not levels:
        return [f"{name} must be a non-empty list of levels"]
    if not all(isinstance(a, (int, float)) and 0 < a < 1 for a in levels):
        return [f"{name} levels must lie in (0, 1), got {levels!r}"]
    if any(b <= a for a, b in zip(levels, levels[1:])):
        return [f"{name} levels must be strictly increasing, got {levels!r}"]
    return []


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return config_from_dict(doc)


def config_from_dict(doc: dict) -> RunConfig:
    try:
        return RunConfig(**_normalise(doc))
    except InvalidParameterError as exc:
        raise ConfigError(str(exc)) from None
