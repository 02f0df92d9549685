"""Flat ``section.key = value`` pipeline configuration."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .exceptions import ConfigError
from .panel import COVARIATES, DEFAULT_PERIOD, PeriodConfig
from .simulate import EffectSpec, SimConfig

_SIM_SCALARS = {f.name: f.type for f in fields(SimConfig)
                if f.name not in ("period", "effect", "behavior_mix", "confounding", "seed")}


def parse_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        values[key] = value
    return values


def load_mapping(path) -> dict:
    """Read a key-value file, or the ``config`` block of a run manifest (.json)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    if path.suffix == ".json":
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if "config" not in doc:
            raise ConfigError(f"{path}: manifest has no 'config' block")
        return {str(k): str(v) for k, v in doc["config"].items()}
    return parse_text(path.read_text(), str(path))


def _num(value: str, key: str, kind=float):
    try:
        return kind(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind.__name__}") from None


def _bool(value: str, key: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def _floats(value: str, key: str) -> tuple:
    return tuple(_num(v.strip(), key) for v in value.split(",") if v.strip())


@dataclass
class PipelineConfig:
    simulate: bool = True
    data_dir: str | None = None
    seed: int | None = 0
    period: PeriodConfig = DEFAULT_PERIOD
    sim: SimConfig = field(default_factory=SimConfig)
    match_covariates: tuple = ("age", "female", "member", "wealth", "n_orders_6m", "spend_per_order_6m")
    caliper: float | None = None
    forest_trees: int = 2000
    forest_min_leaf: int = 5
    forest_subsample: float = 0.5
    forest_honesty: float = 0.5
    forest_mtry: int | None = None
    k_folds: int = 5
    ale_scheme: str = "default"
    ale_bins: int = 25
    ale_binning: str = "equal"
    sme_percentile: float = 50.0
    lambdas: tuple = (0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    tree_cuts: int = 20
    budget: float | None = None
    target: float | None = None
    adjuster_threshold: float = 0.0
    raw: dict = field(default_factory=dict)

    def canonical(self) -> dict:
        """Key-value form recorded in the manifest (sorted keys, strings)."""
        return dict(sorted(self.raw.items()))


def _effect_spec(values: dict) -> EffectSpec:
    kw = {"linear": {}, "steps": {}, "quadratic": {}}
    for key, value in values.items():
        parts = key.split(".")
        if parts[:2] != ["simulate", "effect"]:
            continue
        if len(parts) == 3 and parts[2] in ("intercept", "noise_sd"):
            kw[parts[2]] = _num(value, key)
        elif len(parts) == 4 and parts[2] in ("linear", "quadratic"):
            kw[parts[2]][parts[3]] = _num(value, key)
        elif len(parts) == 4 and parts[2] == "steps":
            try:
                cut, jump = (float(v) for v in value.split(":"))
            except ValueError:
                raise ConfigError(f"{key}: expected 'cut:jump', got {value!r}") from None
            kw["steps"][parts[3]] = (cut, jump)
        else:
            raise ConfigError(f"unknown key {key}")
    return EffectSpec(**kw)


def from_mapping(values: dict, seed_override: int | None = None) -> PipelineConfig:
    values = dict(values)
    if seed_override is not None:
        values["seed"] = str(seed_override)
    known_top = {"seed", "data.dir", "simulate"}
    cfg = PipelineConfig(raw=dict(values))

    sim_flag = _bool(values["simulate"], "simulate") if "simulate" in values else "data.dir" not in values
    if sim_flag and "data.dir" in values:
        raise ConfigError("set exactly one of 'simulate = true' or 'data.dir'")
    if not sim_flag and "data.dir" not in values:
        raise ConfigError("no data source: set 'data.dir' or 'simulate = true'")
    cfg.simulate = sim_flag
    cfg.data_dir = values.get("data.dir")
    if "seed" in values:
        cfg.seed = _num(values["seed"], "seed", int)
    elif sim_flag:
        raise ConfigError("a seed is required when simulating (set 'seed' or pass --seed)")
    else:
        cfg.seed = 0

    period_keys = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("period.")}
    if period_keys:
        cfg.period = PeriodConfig.from_mapping({**{k: getattr(DEFAULT_PERIOD, k).isoformat()
                                                   for k in ("pre_start", "treat_start", "treat_end",
                                                             "post_end")}, **period_keys})

    sim_kw = {}
    behavior, confounding = {}, None
    for key, value in values.items():
        if not key.startswith("simulate."):
            continue
        parts = key.split(".")
        if parts[1] == "effect":
            continue
        if parts[1] == "behavior" and len(parts) == 3:
            behavior[parts[2]] = _num(value, key)
        elif parts[1] == "confounding" and len(parts) == 3:
            confounding = confounding or {}
            confounding[parts[2]] = _num(value, key)
        elif len(parts) == 2 and parts[1] in _SIM_SCALARS:
            typ = _SIM_SCALARS[parts[1]]
            if typ in ("int", int):
                sim_kw[parts[1]] = _num(value, key, int)
            elif typ in ("str", str):
                sim_kw[parts[1]] = value
            else:
                sim_kw[parts[1]] = _num(value, key)
        else:
            raise ConfigError(f"unknown key {key}")
    if behavior:
        sim_kw["behavior_mix"] = behavior
    if confounding is not None:
        sim_kw["confounding"] = confounding
    cfg.sim = SimConfig(seed=cfg.seed, period=cfg.period, effect=_effect_spec(values), **sim_kw)

    scalars = {
        "match.caliper": ("caliper", float),
        "forest.n_trees": ("forest_trees", int),
        "forest.min_leaf": ("forest_min_leaf", int),
        "forest.subsample_rate": ("forest_subsample", float),
        "forest.honesty_fraction": ("forest_honesty", float),
        "forest.mtry": ("forest_mtry", int),
        "forest.k_folds": ("k_folds", int),
        "ale.n_bins": ("ale_bins", int),
        "sme.percentile": ("sme_percentile", float),
        "tree.n_cuts": ("tree_cuts", int),
        "policy.budget": ("budget", float),
        "policy.target": ("target", float),
        "welfare.adjuster_threshold": ("adjuster_threshold", float),
    }
    for key, value in values.items():
        if key in known_top or key.startswith(("simulate.", "period.")):
            continue
        if key in scalars:
            attr, kind = scalars[key]
            setattr(cfg, attr, _num(value, key, kind))
        elif key == "match.covariates":
            covs = tuple(c.strip() for c in value.split(",") if c.strip())
            bad = [c for c in covs if c not in COVARIATES]
            if bad:
                raise ConfigError(f"match.covariates: unknown covariates {bad}")
            cfg.match_covariates = covs
        elif key == "ale.scheme":
            if value not in ("default", "alternate"):
                raise ConfigError("ale.scheme must be 'default' or 'alternate'")
            cfg.ale_scheme = value
        elif key == "ale.binning":
            if value not in ("equal", "quantile"):
                raise ConfigError("ale.binning must be 'equal' or 'quantile'")
            cfg.ale_binning = value
        elif key == "policy.lambdas":
            cfg.lambdas = _floats(value, key)
            if not cfg.lambdas or any(not 0.5 <= lam <= 1 for lam in cfg.lambdas):
                raise ConfigError("policy.lambdas must be values in [0.5, 1]")
        else:
            raise ConfigError(f"unknown key {key}")
    if not 0 < cfg.sme_percentile < 100:
        raise ConfigError("sme.percentile must lie in (0, 100)")
    return cfg


def load(path=None, seed_override: int | None = None) -> PipelineConfig:
    values = load_mapping(path) if path is not None else {"simulate": "true", "seed": "0"}
    return from_mapping(values, seed_override)
