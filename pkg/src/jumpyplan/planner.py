"""CEM model-predictive control in latent-skill space over a jumpy model.

With one iteration and a standard-normal proposal this is random shooting.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import env
from .nn import DiagGaussian, MlpParams, NumericalError, mlp_forward
from .skill import SkillModel, decode_action


@dataclass(frozen=True)
class PlannerConfig:
    iterations: int = 1
    samples: int = 1000
    horizon: int = 3
    elite_frac: float = 0.1
    gamma: float = 1.0
    hold_steps: int = 2
    init_std: float = 1.0
    std_floor: float = 0.05
    chunk_size: int = 250
    threads: int = 1
    # arithmetic of the imagined rollouts; scores are always accumulated in float64
    precision: str = "float32"

    def __post_init__(self):
        if self.iterations < 1 or self.samples < 1 or self.horizon < 1 or self.hold_steps < 1:
            raise ValueError("iterations, samples, horizon and hold_steps must be >= 1")
        if not 0.0 < self.elite_frac <= 1.0:
            raise ValueError("elite_frac must be in (0, 1]")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if self.init_std <= 0 or self.std_floor <= 0:
            raise ValueError("proposal scales must be positive")
        if self.chunk_size < 1 or self.threads < 1:
            raise ValueError("chunk_size and threads must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def elite_count(self) -> int:
        # guard against 0.1 * 30 = 3.0000000000000004
        return max(1, math.ceil(self.elite_frac * self.samples - 1e-9))


@dataclass
class Proposal:
    mean: np.ndarray  # (H, L)
    std: np.ndarray  # (H, L)

    @classmethod
    def initial(cls, horizon: int, latent_dim: int, std: float = 1.0) -> "Proposal":
        return cls(np.zeros((horizon, latent_dim)), np.full((horizon, latent_dim), float(std)))

    def gaussians(self) -> list[DiagGaussian]:
        return [DiagGaussian(m, np.log(s)) for m, s in zip(self.mean, self.std)]


@dataclass
class PlanResult:
    plans: np.ndarray  # (N, H, L)
    trajectories: np.ndarray  # (N, H+1, 12)
    scores: np.ndarray  # (N,)
    best_index: int
    chosen_z: np.ndarray
    seed: int
    # per CEM iteration: (scores, elite indices)
    history: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    @property
    def best_score(self) -> float:
        return float(self.scores[self.best_index])


def score(trajectory, task, gamma: float) -> float:
    """Discounted sum of task rewards over the H+1 imagined states, h = 0 included."""
    r = env.reward(task, np.asarray(trajectory))
    total = 0.0
    for h, rh in enumerate(np.atleast_1d(r)):
        total += gamma ** h * float(rh)
    return total


def score_batch(trajectories: np.ndarray, task, gamma: float) -> np.ndarray:
    r = env.reward(task, trajectories)  # (N, H+1)
    acc = np.zeros(r.shape[0])
    for h in range(r.shape[1]):
        acc = acc + gamma ** h * r[:, h]
    return acc


class _RolloutNets:
    """Embedder and jumpy decoder cast to one dtype for fast batched rollouts."""

    def __init__(self, model: SkillModel, dtype):
        self.dtype = np.dtype(dtype)
        self.embed = self._cast(model.nets["embed"])
        self.jumpy = self._cast(model.nets["jumpy_dec"])
        self.scale = model.delta_scale.scale.astype(self.dtype)

    def _cast(self, net: MlpParams) -> MlpParams:
        return MlpParams(net.name, net.layers, {k: net.arrays[k].astype(self.dtype) for k in net.param_names()})

    def features(self, s: np.ndarray) -> np.ndarray:
        return mlp_forward(self.embed, s)

    def step(self, s: np.ndarray, feats: np.ndarray, z: np.ndarray) -> np.ndarray:
        out = mlp_forward(self.jumpy, np.concatenate([feats, z], axis=1))
        out *= self.scale
        out += s
        return out


def _rollout_rows(nets: _RolloutNets, state: np.ndarray, f0: np.ndarray, latents: np.ndarray) -> np.ndarray:
    n, H, _ = latents.shape
    traj = np.empty((n, H + 1, state.shape[-1]))
    traj[:, 0] = state
    cur = np.broadcast_to(state.astype(nets.dtype), (n, state.shape[-1]))
    z = latents.astype(nets.dtype)
    for h in range(H):
        feats = np.broadcast_to(f0, (n, f0.shape[-1])) if h == 0 else nets.features(cur)
        cur = nets.step(cur, feats, z[:, h])
        traj[:, h + 1] = cur
    return traj


def rollout_imaginary(state, latent_sequence, model: SkillModel, chunk_size: int = 250,
                      threads: int = 1, precision: str = "float64") -> np.ndarray:
    """Chain the jumpy model's mean prediction along a latent sequence.

    ``latent_sequence`` is (H, L) for one plan or (N, H, L) for many; rows are
    processed in fixed chunks so the result does not depend on ``threads``.
    Trajectories are returned in float64 whatever ``precision`` the rollout used.
    """
    state = np.asarray(state, dtype=float)
    z = np.asarray(latent_sequence, dtype=float)
    single = z.ndim == 2
    if single:
        z = z[None]
    if z.shape[1] == 0:
        out = np.broadcast_to(state, (z.shape[0], 1, state.shape[-1])).copy()
        return out[0] if single else out
    nets = _RolloutNets(model, precision)
    f0 = nets.features(state[None].astype(nets.dtype))[0]
    chunks = [z[i:i + chunk_size] for i in range(0, len(z), chunk_size)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda c: _rollout_rows(nets, state, f0, c), chunks))
    else:
        parts = [_rollout_rows(nets, state, f0, c) for c in chunks]
    out = np.concatenate(parts)
    return out[0] if single else out


def update_proposal(elite_plans, std_floor: float = 0.05) -> Proposal:
    """Refit per-position Gaussians to the elites (population std, floored)."""
    e = np.asarray(elite_plans, dtype=float)
    if e.ndim != 3 or e.shape[0] < 1:
        raise ValueError("update_proposal needs at least one elite plan of shape (H, L)")
    return Proposal(e.mean(axis=0), np.maximum(e.std(axis=0), std_floor))


def plan(state, model: SkillModel, task, config: PlannerConfig, rng: np.random.Generator | None = None,
         seed: int | None = None, proposal: Proposal | None = None) -> PlanResult:
    """Sample, roll out, score and refit for ``config.iterations`` rounds.

    All randomness comes from one stream seeded by ``seed`` (drawn from ``rng``
    when not given); sample ``n`` owns row ``n`` of each noise block.
    """
    if seed is None:
        seed = int((rng or np.random.default_rng()).integers(0, 2 ** 63 - 1))
    prng = np.random.default_rng(seed)
    state = np.asarray(state, dtype=float)
    N, H, L = config.samples, config.horizon, model.latent_dim
    prop = proposal or Proposal.initial(H, L, config.init_std)
    history = []
    for i in range(config.iterations):
        eps = prng.standard_normal((N, H, L))
        plans = prop.mean + prop.std * eps
        trajs = rollout_imaginary(state, plans, model, config.chunk_size, config.threads, config.precision)
        bad = ~np.all(np.isfinite(trajs), axis=(1, 2))
        if bad.any():
            raise NumericalError(f"non-finite imagined state in sample {int(np.argmax(bad))} "
                                 f"(iteration {i}, plan seed {seed})")
        scores = score_batch(trajs, task, config.gamma)
        order = np.argsort(-scores, kind="stable")
        elites = order[:config.elite_count]
        history.append((scores, elites))
        if i + 1 < config.iterations:
            prop = update_proposal(plans[elites], config.std_floor)
    best = int(np.argmax(scores))
    return PlanResult(plans, trajs, scores, best, plans[best, 0].copy(), seed, history)


# ---------------------------------------------------------------------------
# receding-horizon execution


@dataclass
class PlanCache:
    z: np.ndarray | None = None
    served: int = 0
    plan_calls: int = 0
    last: PlanResult | None = None

    @property
    def planned_score(self) -> float:
        return float("nan") if self.last is None else self.last.best_score


def act(state, model: SkillModel, task, config: PlannerConfig, rng: np.random.Generator,
        cache: PlanCache | None = None, keep_result: bool = False) -> tuple[np.ndarray, PlanCache]:
    """Next primitive action; replans once the held latent has served ``hold_steps`` actions."""
    cache = PlanCache() if cache is None else cache
    if cache.z is None or cache.served >= config.hold_steps:
        result = plan(state, model, task, config, rng)
        if not keep_result:
            # keep only what the trace needs
            result = PlanResult(result.plans[:0], result.trajectories[:0], result.scores[[result.best_index]],
                                0, result.chosen_z, result.seed)
        cache = PlanCache(result.chosen_z, 0, cache.plan_calls + 1, result)
    action = decode_action(model, state, cache.z)
    cache.served += 1
    return action, cache
