"""Evaluation engine: run planning and reference variants over tasks and seeds,
sweep planner settings, record score traces and finetune on executed data."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import env, files, planner, skill
from .config import VARIANTS
from .planner import PlannerConfig
from .skill import SkillModel

log = logging.getLogger(__name__)

EPISODE_STEPS = 400
PLANNING_VARIANTS = ("zeroshot_plan_jumpy", "zeroshot_plan_k1", "plan_finetune")
SUMMARY_COLUMNS = ("task", "variant", "seeds", "mean_return", "std_return", "mean_max_reward", "std_max_reward")
GRID_COLUMNS = ("task", "variant", "horizon", "hold") + SUMMARY_COLUMNS[2:]
TRACE_COLUMNS = ("step", "planned_score", "reward")
# state entries kept in a record's path: gripper x, y, aperture and the three object positions
PATH_INDICES = (env.GX, env.GY, env.AP, 4, 5, 7, 8, 10, 11)


class ConfigurationError(ValueError):
    pass


class TraceError(ValueError):
    pass


@dataclass
class Models:
    jumpy: SkillModel | None = None
    k1: SkillModel | None = None


@dataclass
class FinetuneSettings:
    every: int = 100
    steps: int = 200
    lr: float = 3e-4


@dataclass
class EvalRecord:
    task: str
    variant: str
    seed: int
    episode_return: float
    max_reward: float
    steps: int
    horizon: int | None = None
    hold: int | None = None
    # per step: (planned_score, reward, plan_seed or None when the held latent was reused)
    trace: list[tuple[float, float, int | None]] | None = None
    path: list[list[float]] | None = None

    def to_json(self) -> dict:
        return {"task": self.task, "variant": self.variant, "seed": self.seed,
                "return": self.episode_return, "max_reward": self.max_reward, "steps": self.steps,
                "horizon": self.horizon, "hold": self.hold,
                "trace": None if self.trace is None else [list(r) for r in self.trace],
                "path": self.path}

    @classmethod
    def from_json(cls, d: dict) -> "EvalRecord":
        trace = d.get("trace")
        return cls(d["task"], d["variant"], int(d["seed"]), float(d["return"]), float(d["max_reward"]),
                   int(d["steps"]), d.get("horizon"), d.get("hold"),
                   None if trace is None else [(float(a), float(b), c) for a, b, c in trace], d.get("path"))


@dataclass
class EvalSummary:
    task: str
    variant: str
    seeds: int
    mean_return: float
    std_return: float
    mean_max_reward: float
    std_max_reward: float
    horizon: int | None = None
    hold: int | None = None

    def row(self, columns=SUMMARY_COLUMNS) -> list:
        return [getattr(self, c) for c in columns]


@dataclass
class Episode:
    """Everything an episode produced, including the finetuning stream."""
    record: EvalRecord
    states: np.ndarray  # (steps+1, 12)
    latents: np.ndarray | None  # (steps, L): latent in force at each step


# ---------------------------------------------------------------------------
# seeds


def eval_seed(master_seed: int, index: int) -> int:
    """Seed of the ``index``-th evaluation episode; shared by all tasks and variants."""
    return int(np.random.SeedSequence([master_seed, 0x5EED, index]).generate_state(1, np.uint64)[0])


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    return np.random.default_rng([seed, 0]), np.random.default_rng([seed, 1])


# ---------------------------------------------------------------------------
# episodes


def reference_action(task: str, state) -> np.ndarray:
    """Scripted controller for the reference column (in-distribution tasks and reach_green)."""
    policy = env.task_reference_policy(task)
    if policy is not None:
        return env.base_policy_action(policy, state)
    if task == "reach_green":
        return env.scripted_reach(state, "green")
    raise ConfigurationError(f"no scripted reference controller for task {task!r}")


def _model_for(variant: str, models: Models) -> SkillModel | None:
    if variant == "base_policy_reference":
        return None
    m = models.k1 if variant == "zeroshot_plan_k1" else models.jumpy
    if m is None:
        which = "one-step (K=1)" if variant == "zeroshot_plan_k1" else "jumpy"
        raise ConfigurationError(f"variant {variant} needs a {which} model")
    return m


def triples_from(states: np.ndarray, latents: np.ndarray, K: int):
    """(s_t, z_t, s_{t+K}) for every step whose K-step outcome was observed."""
    n = len(states) - K
    if n <= 0:
        L = latents.shape[-1]
        return np.empty((0, states.shape[-1])), np.empty((0, L)), np.empty((0, states.shape[-1]))
    return states[:n].copy(), latents[:n].copy(), states[K:K + n].copy()


def play(variant: str, task: str, models: Models, config: PlannerConfig, seed: int,
         steps: int = EPISODE_STEPS, finetune: FinetuneSettings | None = None,
         keep_path: bool = False) -> Episode:
    """Run one noise-free episode and keep its states and executed latents."""
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}")
    env.get_task(task)
    model = _model_for(variant, models)
    env_rng, plan_rng = _streams(seed)
    s = env.reset(env_rng)
    states = np.empty((steps + 1, env.STATE_DIM))
    states[0] = s
    latents = None if model is None else np.empty((steps, model.latent_dim))
    rewards = np.empty(steps)
    trace = [] if variant in PLANNING_VARIANTS else None
    cache = None
    z = None
    hold = None
    if variant == "random_hl":
        # one draw per skill duration
        hold = model.K
    elif variant in PLANNING_VARIANTS:
        hold = config.hold_steps
    for t in range(steps):
        if variant == "base_policy_reference":
            a = reference_action(task, s)
        elif variant == "random_hl":
            if t % hold == 0:
                z = plan_rng.standard_normal(model.latent_dim)
            a = skill.decode_action(model, s, z)
            latents[t] = z
        else:
            if (variant == "plan_finetune" and finetune is not None and finetune.steps > 0
                    and t > 0 and t % finetune.every == 0):
                model = _finetune_midway(model, states[:t + 1], latents[:t], finetune, seed, t)
            calls = cache.plan_calls if cache is not None else 0
            a, cache = planner.act(s, model, task, config, plan_rng, cache)
            fresh = cache.plan_calls != calls
            latents[t] = cache.z
            trace.append((cache.planned_score, 0.0, cache.last.seed if fresh else None))
        s = env.step(s, a)
        states[t + 1] = s
        rewards[t] = env.reward(task, s)
        if trace is not None:
            trace[-1] = (trace[-1][0], float(rewards[t]), trace[-1][2])
    horizon = config.horizon if variant in PLANNING_VARIANTS else None
    path = None
    if keep_path:
        path = [[round(float(v), 6) for v in row] for row in states[:, PATH_INDICES]]
    record = EvalRecord(task, variant, int(seed), float(rewards.sum()), float(rewards.max()), steps,
                        horizon, hold, trace, path)
    return Episode(record, states, latents)


def _finetune_midway(model: SkillModel, states, latents, settings: FinetuneSettings, seed: int, t: int):
    s0, z, s1 = triples_from(states, latents, model.K)
    if len(s0) == 0:
        return model
    ft_seed = int(np.random.SeedSequence([seed, 2, t]).generate_state(1, np.uint64)[0] >> np.uint64(1))
    return skill.finetune(model, (s0, z, s1), settings.steps, ft_seed, lr=settings.lr)


def run_episode(variant: str, task: str, models: Models, config: PlannerConfig, seed: int,
                steps: int = EPISODE_STEPS, finetune: FinetuneSettings | None = None,
                keep_path: bool = False) -> EvalRecord:
    """One evaluation episode of ``variant`` on ``task``.

    The one-step planner reads its horizon from ``config`` in primitive steps,
    so callers pass a config whose ``horizon`` is already expressed that way.
    """
    return play(variant, task, models, config, seed, steps, finetune, keep_path).record


def summarize(records: list[EvalRecord], horizon: int | None = None, hold: int | None = None) -> EvalSummary:
    """Mean and sample standard deviation (0 for a single seed) of return and max reward."""
    if not records:
        raise ValueError("cannot summarise zero records")
    rets = np.array([r.episode_return for r in records])
    maxes = np.array([r.max_reward for r in records])
    n = len(records)

    def sd(x):
        return float(np.std(x, ddof=1)) if n > 1 else 0.0

    return EvalSummary(records[0].task, records[0].variant, n, float(rets.mean()), sd(rets),
                       float(maxes.mean()), sd(maxes), horizon, hold)


def evaluate(variant: str, task: str, models: Models, config: PlannerConfig, seeds: int,
             master_seed: int = 0, steps: int = EPISODE_STEPS, finetune: FinetuneSettings | None = None,
             workers: int = 1, keep_path: bool = False) -> tuple[EvalSummary, list[EvalRecord]]:
    if seeds < 1:
        raise ValueError("seeds must be >= 1")
    ep_seeds = [eval_seed(master_seed, i) for i in range(seeds)]

    def one(s):
        return run_episode(variant, task, models, config, s, steps, finetune, keep_path)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(one, ep_seeds))
    else:
        records = [one(s) for s in ep_seeds]
    summary = summarize(records, config.horizon if variant in PLANNING_VARIANTS else None,
                        records[0].hold)
    log.info("%s %s: return %.1f +- %.1f over %d seeds", task, variant, summary.mean_return,
             summary.std_return, seeds)
    return summary, records


# ---------------------------------------------------------------------------
# sweeps


def sweep_jumpy(task: str, models: Models, config: PlannerConfig, horizons=(1, 2, 3, 5),
                holds=(1, 2, 10, 20, 100, 200), seeds: int = 20, master_seed: int = 0,
                steps: int = EPISODE_STEPS) -> list[EvalSummary]:
    """Jumpy planner over the horizon x hold grid, row-major in ``horizons``."""
    if not horizons or not holds:
        raise ValueError("sweep grids must be non-empty")
    out = []
    for H in horizons:
        for hold in holds:
            cfg = dataclasses.replace(config, horizon=int(H), hold_steps=int(hold))
            out.append(evaluate("zeroshot_plan_jumpy", task, models, cfg, seeds, master_seed, steps)[0])
    return out


def sweep_k1(task: str, models: Models, config: PlannerConfig, horizons=(1, 2, 3, 5, 10, 30, 50),
             seeds: int = 20, master_seed: int = 0, steps: int = EPISODE_STEPS) -> list[EvalSummary]:
    """One-step planner over horizons given in primitive steps."""
    if not horizons:
        raise ValueError("sweep grid must be non-empty")
    return [evaluate("zeroshot_plan_k1", task, models, dataclasses.replace(config, horizon=int(H)),
                     seeds, master_seed, steps)[0] for H in horizons]


# ---------------------------------------------------------------------------
# finetuning on executed plans


@dataclass
class FinetuneReport:
    model: SkillModel
    before: EvalSummary
    after: EvalSummary
    validation_error_before: float
    validation_error_after: float
    train_triples: int
    validation_triples: int

    @property
    def return_change(self) -> float:
        return self.after.mean_return - self.before.mean_return


def collect_triples(task: str, model: SkillModel, config: PlannerConfig, episodes: int, seed: int,
                    steps: int = EPISODE_STEPS) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Per-episode (s_t, z_t, s_{t+K}) arrays from planning episodes."""
    out = []
    for i in range(episodes):
        ep_seed = int(np.random.SeedSequence([seed, 0xC011, i]).generate_state(1, np.uint64)[0])
        ep = play("zeroshot_plan_jumpy", task, Models(jumpy=model), config, ep_seed, steps)
        out.append(triples_from(ep.states, ep.latents, model.K))
    return out


def collect_and_finetune(task: str, model: SkillModel, config: PlannerConfig, episodes: int,
                         finetune_steps: int, seed: int, eval_seeds: int = 20,
                         validation_fraction: float = 0.2, steps: int = EPISODE_STEPS,
                         lr: float = 3e-4) -> FinetuneReport:
    """Collect planner data, refit the jumpy decoder on it, and evaluate before and after.

    Validation triples come from whole held-out episodes when there are at
    least two, otherwise from the tail of the single episode.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    per_ep = collect_triples(task, model, config, episodes, seed, steps)
    if episodes >= 2:
        n_val = max(1, int(round(validation_fraction * episodes)))
        train_eps, val_eps = per_ep[:-n_val], per_ep[-n_val:]
        train = tuple(np.concatenate(x) for x in zip(*train_eps))
        val = tuple(np.concatenate(x) for x in zip(*val_eps))
    else:
        s0, z, s1 = per_ep[0]
        cut = int(len(s0) * (1.0 - validation_fraction))
        train, val = (s0[:cut], z[:cut], s1[:cut]), (s0[cut:], z[cut:], s1[cut:])
    err_before = skill.jumpy_error(model, *val)
    tuned = skill.finetune(model, train, finetune_steps, seed, lr=lr, validation=val)
    err_after = skill.jumpy_error(tuned, *val)
    before, _ = evaluate("zeroshot_plan_jumpy", task, Models(jumpy=model), config, eval_seeds, seed, steps)
    after, _ = evaluate("zeroshot_plan_jumpy", task, Models(jumpy=tuned), config, eval_seeds, seed, steps)
    after = dataclasses.replace(after, variant="plan_finetune")
    return FinetuneReport(tuned, before, after, err_before, err_after, len(train[0]), len(val[0]))


# ---------------------------------------------------------------------------
# traces


def record_plan_trace(record: EvalRecord) -> list[tuple[int, float, float]]:
    """(step, planned_score, reward) rows of a planning episode."""
    if not record.trace:
        raise TraceError(f"record {record.task}/{record.variant}/{record.seed} has no plan trace")
    return [(t, score, reward) for t, (score, reward, _) in enumerate(record.trace)]


def replay_planned_scores(record: EvalRecord, models: Models, config: PlannerConfig) -> list[float]:
    """Re-run a planning episode from its stored plan seeds; returns the planned score per step."""
    if not record.trace:
        raise TraceError("record has no plan trace")
    if record.variant == "plan_finetune":
        raise TraceError("plan_finetune records change the model mid-episode and cannot be replayed")
    model = _model_for(record.variant, models)
    env_rng, _ = _streams(record.seed)
    s = env.reset(env_rng)
    scores, z, score = [], None, math.nan
    for _, _, plan_seed in record.trace:
        if plan_seed is not None:
            res = planner.plan(s, model, record.task, config, seed=int(plan_seed))
            z, score = res.chosen_z, res.best_score
        scores.append(score)
        s = env.step(s, skill.decode_action(model, s, z))
    return scores


# ---------------------------------------------------------------------------
# output


def records_jsonl(records: list[EvalRecord]) -> str:
    return "".join(json.dumps(r.to_json(), separators=(",", ":")) + "\n" for r in records)


def read_records(path) -> list[EvalRecord]:
    with open(path) as f:
        return [EvalRecord.from_json(json.loads(line)) for line in f if line.strip()]


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else ("" if v is None else v) for v in row])
    return buf.getvalue()


def summary_csv(summaries: list[EvalSummary], grid: bool = False) -> str:
    cols = GRID_COLUMNS if grid else SUMMARY_COLUMNS
    return _csv_text(cols, [s.row(cols) for s in summaries])


def trace_csv(record: EvalRecord) -> str:
    return _csv_text(TRACE_COLUMNS, record_plan_trace(record))


def write_records(records: list[EvalRecord], path) -> None:
    files.atomic_write_text(path, records_jsonl(records))


def write_summaries(summaries: list[EvalSummary], path, grid: bool = False) -> None:
    files.atomic_write_text(path, summary_csv(summaries, grid))


def write_trace(record: EvalRecord, path) -> None:
    files.atomic_write_text(path, trace_csv(record))
