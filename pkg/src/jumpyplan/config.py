"""Run configuration: one TOML file, parsed strictly.

Unknown keys and out-of-range values raise :class:`ConfigError` before any
work starts.  Every section is optional; missing keys take the defaults below.

Example::

    seed = 0
    out = "runs/demo"

    [data]
    episodes = 500

    [model]          # shared by both skill models
    beta_kl = 0.01

    [model_k1]       # overrides for the one-step baseline only
    total_steps = 10000

    [planner]
    samples = 1000
    horizon = 3

    [eval]
    seeds = 20
    tasks = ["lift_red", "reach_red"]
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from . import env
from .planner import PlannerConfig
from .skill import SkillModelConfig

VARIANTS = ("random_hl", "zeroshot_plan_jumpy", "zeroshot_plan_k1", "plan_finetune", "base_policy_reference")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    episodes: int = 500
    noise: bool = True
    holdout_fraction: float = 0.1

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must be in (0, 1)")


@dataclass(frozen=True)
class EvalConfig:
    seeds: int = 50
    episode_steps: int = 400
    tasks: tuple[str, ...] = env.TASK_NAMES
    variants: tuple[str, ...] = ("random_hl", "zeroshot_plan_jumpy", "zeroshot_plan_k1")
    # planning horizon of the one-step planner, in primitive steps
    k1_horizon: int = 10
    # plan_finetune: refit the jumpy decoder every this many steps of an episode
    finetune_every: int = 100
    finetune_steps: int = 200

    def __post_init__(self):
        if self.seeds < 1 or self.episode_steps < 1 or self.k1_horizon < 1:
            raise ValueError("seeds, episode_steps and k1_horizon must be >= 1")
        if self.finetune_every < 1 or self.finetune_steps < 0:
            raise ValueError("finetune_every must be >= 1 and finetune_steps >= 0")
        for t in self.tasks:
            if t not in env.TASKS:
                raise ValueError(f"unknown task {t!r}")
        for v in self.variants:
            if v not in VARIANTS:
                raise ValueError(f"unknown variant {v!r}")


@dataclass(frozen=True)
class SweepConfig:
    horizons: tuple[int, ...] = (1, 2, 3, 5)
    holds: tuple[int, ...] = (1, 2, 10, 20, 100, 200)
    k1_horizons: tuple[int, ...] = (1, 2, 3, 5, 10, 30, 50)

    def __post_init__(self):
        for name in ("horizons", "holds", "k1_horizons"):
            values = getattr(self, name)
            if not values or min(values) < 1:
                raise ValueError(f"{name} must be a non-empty list of positive integers")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    threads: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    model: SkillModelConfig = field(default_factory=lambda: SkillModelConfig(K=10))
    model_k1: SkillModelConfig = field(default_factory=lambda: SkillModelConfig(K=1))
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def __post_init__(self):
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def skill_config(self, K: int) -> SkillModelConfig:
        if K == self.model.K:
            return self.model
        if K == self.model_k1.K:
            return self.model_k1
        return dataclasses.replace(self.model, K=K)

    def planner_k1(self) -> PlannerConfig:
        return dataclasses.replace(self.planner, horizon=self.eval.k1_horizon)


def _build(cls, table: dict, where: str, base=None):
    """Instantiate dataclass ``cls`` from ``table``, rejecting unknown keys."""
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in table.items():
        if key not in names:
            raise ConfigError(f"unknown key {where}{key!r}; allowed: {', '.join(sorted(names))}")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    for key, value in kwargs.items():
        expected = names[key].type
        if isinstance(expected, str) and expected in ("int", "float", "bool", "str"):
            ok = {"int": lambda v: isinstance(v, int) and not isinstance(v, bool),
                  "float": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
                  "bool": lambda v: isinstance(v, bool),
                  "str": lambda v: isinstance(v, str)}[expected](value)
            if not ok:
                raise ConfigError(f"{where}{key} must be {expected}, got {value!r}")
            if expected == "float":
                kwargs[key] = float(value)
    try:
        return dataclasses.replace(base, **kwargs) if base is not None else cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{where.rstrip('.') or 'top level'}] {e}") from None


SECTIONS = {"data": DataConfig, "model": SkillModelConfig, "model_k1": SkillModelConfig,
            "planner": PlannerConfig, "eval": EvalConfig, "sweep": SweepConfig}


def from_dict(raw: dict) -> RunConfig:
    top = {k: v for k, v in raw.items() if k not in SECTIONS}
    cfg = _build(RunConfig, top, "")
    parts = {}
    for name, cls in SECTIONS.items():
        table = raw.get(name, {})
        if not isinstance(table, dict):
            raise ConfigError(f"[{name}] must be a table")
        if name == "model":
            parts[name] = _build(cls, table, "model.", SkillModelConfig(K=10))
        elif name == "model_k1":
            # the baseline inherits the shared model settings, then its own overrides
            shared = {k: v for k, v in raw.get("model", {}).items() if k != "K"}
            base = _build(cls, shared, "model.", SkillModelConfig(K=1))
            parts[name] = _build(cls, table, "model_k1.", base)
        else:
            parts[name] = _build(cls, table, f"{name}.")
    return dataclasses.replace(cfg, **parts)


def load(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            raw = tomli.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return from_dict(raw)


def to_dict(cfg: RunConfig) -> dict:
    """Plain-data view (tuples as lists) for metadata sidecars."""
    def plain(v):
        if dataclasses.is_dataclass(v):
            return {f.name: plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        return v
    return plain(cfg)
