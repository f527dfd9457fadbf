"""Offline data: scripted two-policy episodes, the JMPD1 file format,
snippet sampling and state-delta normalisation."""
from __future__ import annotations

import hashlib
import io
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import env

EPISODE_STEPS = 400
SWITCH_STEP = 200
MAGIC = b"JMPD1"
_HEADER = struct.Struct("<IIIIQB")
_EPISODE_HEAD = struct.Struct("<QBB")
DELTA_PERCENTILE = 99.5
DELTA_FLOOR = 1e-3
DELTA_SAMPLES = 100_000


class DatasetError(ValueError):
    pass


@dataclass
class Trajectory:
    states: np.ndarray  # (T+1, 12)
    actions: np.ndarray  # (T, 3)
    policy_ids: tuple[int, int]
    seed: int


@dataclass
class Snippet:
    states: np.ndarray  # (K+1, 12)
    actions: np.ndarray  # (K, 3)


@dataclass
class Dataset:
    states: np.ndarray  # (E, T+1, 12) float32
    actions: np.ndarray  # (E, T, 3) float32
    policy_ids: np.ndarray  # (E, 2) uint8
    seeds: np.ndarray  # (E,) uint64
    master_seed: int
    noise: bool

    @property
    def episode_count(self) -> int:
        return self.states.shape[0]

    @property
    def T(self) -> int:
        return self.actions.shape[1]

    @property
    def transition_count(self) -> int:
        return self.episode_count * self.T

    def episode(self, i: int) -> Trajectory:
        return Trajectory(self.states[i].astype(float), self.actions[i].astype(float),
                          (int(self.policy_ids[i, 0]), int(self.policy_ids[i, 1])), int(self.seeds[i]))

    def split(self, holdout_fraction: float) -> tuple["Dataset", "Dataset"]:
        """Split by episode: the last ``ceil(fraction * E)`` episodes are held out."""
        n_hold = max(1, int(np.ceil(holdout_fraction * self.episode_count)))
        if n_hold >= self.episode_count:
            raise DatasetError("holdout would leave no training episodes")
        cut = self.episode_count - n_hold

        def part(sl):
            return Dataset(self.states[sl], self.actions[sl], self.policy_ids[sl], self.seeds[sl],
                           self.master_seed, self.noise)

        return part(slice(0, cut)), part(slice(cut, None))


def episode_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1, np.uint64)[0])


def generate_episode(seed: int, noise: bool = True, T: int = EPISODE_STEPS) -> Trajectory:
    """Two base policies drawn uniformly (with replacement), each run for half the episode."""
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, len(env.BASE_POLICIES), size=2)
    s = env.reset(rng)
    noise_std = env.MOTION_NOISE if noise else 0.0
    states = np.empty((T + 1, env.STATE_DIM))
    actions = np.empty((T, env.ACTION_DIM))
    states[0] = s
    switch = T // 2
    for t in range(T):
        a = env.base_policy_action(int(ids[0] if t < switch else ids[1]), s)
        s = env.step(s, a, rng, noise_std)
        actions[t] = a
        states[t + 1] = s
    return Trajectory(states, actions, (int(ids[0]), int(ids[1])), int(seed))


def generate_dataset(episode_count: int, seed: int, noise: bool = True, path=None,
                     T: int = EPISODE_STEPS) -> Dataset:
    if episode_count < 1:
        raise DatasetError("episode_count must be >= 1")
    seeds = [episode_seed(seed, i) for i in range(episode_count)]
    trajs = [generate_episode(s, noise, T) for s in seeds]
    ds = Dataset(
        states=np.stack([t.states for t in trajs]).astype(np.float32),
        actions=np.stack([t.actions for t in trajs]).astype(np.float32),
        policy_ids=np.array([t.policy_ids for t in trajs], dtype=np.uint8),
        seeds=np.array(seeds, dtype=np.uint64),
        master_seed=int(seed), noise=bool(noise),
    )
    if path is not None:
        write_dataset(ds, path)
    return ds


# ---------------------------------------------------------------------------
# file format


def dataset_bytes(ds: Dataset) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_HEADER.pack(ds.episode_count, ds.T, env.STATE_DIM, env.ACTION_DIM,
                           ds.master_seed, int(ds.noise)))
    for i in range(ds.episode_count):
        buf.write(_EPISODE_HEAD.pack(int(ds.seeds[i]), int(ds.policy_ids[i, 0]), int(ds.policy_ids[i, 1])))
        buf.write(np.ascontiguousarray(ds.states[i], dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(ds.actions[i], dtype="<f4").tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def write_dataset(ds: Dataset, path) -> str:
    """Atomically write ``ds``; returns the hex content hash."""
    path = Path(path)
    if not path.parent.is_dir():
        raise DatasetError(f"output directory {path.parent} does not exist")
    data = dataset_bytes(ds)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return data[-32:].hex()


def read_header(path) -> dict:
    with open(path, "rb") as f:
        head = f.read(len(MAGIC) + _HEADER.size)
    if head[:len(MAGIC)] != MAGIC:
        raise DatasetError(f"{path}: not a JMPD1 dataset")
    e, T, sd, ad, seed, noise = _HEADER.unpack(head[len(MAGIC):])
    return {"episode_count": e, "T": T, "state_dim": sd, "action_dim": ad,
            "master_seed": seed, "noise": bool(noise)}


def read_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise DatasetError(f"{path}: not a JMPD1 dataset")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise DatasetError(f"{path}: content hash mismatch")
    off = len(MAGIC)
    E, T, sd, ad, seed, noise = _HEADER.unpack_from(body, off)
    off += _HEADER.size
    if sd != env.STATE_DIM or ad != env.ACTION_DIM:
        raise DatasetError(f"{path}: state/action dims {sd}/{ad} do not match the environment")
    states = np.empty((E, T + 1, sd), np.float32)
    actions = np.empty((E, T, ad), np.float32)
    pids = np.empty((E, 2), np.uint8)
    seeds = np.empty(E, np.uint64)
    ns, na = (T + 1) * sd * 4, T * ad * 4
    for i in range(E):
        seeds[i], pids[i, 0], pids[i, 1] = _EPISODE_HEAD.unpack_from(body, off)
        off += _EPISODE_HEAD.size
        states[i] = np.frombuffer(body, "<f4", (T + 1) * sd, off).reshape(T + 1, sd)
        off += ns
        actions[i] = np.frombuffer(body, "<f4", T * ad, off).reshape(T, ad)
        off += na
    if off != len(body):
        raise DatasetError(f"{path}: trailing bytes after {E} episodes")
    return Dataset(states, actions, pids, seeds, int(seed), bool(noise))


def content_hash(path) -> str:
    return Path(path).read_bytes()[-32:].hex()


# ---------------------------------------------------------------------------
# sampling


def _check_K(ds: Dataset, K: int):
    if K < 1:
        raise DatasetError("K must be >= 1")
    if K > ds.T:
        raise DatasetError(f"K={K} exceeds episode length {ds.T}")


def sample_starts(ds: Dataset, rng: np.random.Generator, K: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Uniform (episode, start) pairs with ``start`` in ``[0, T-K]``."""
    _check_K(ds, K)
    ep = rng.integers(0, ds.episode_count, size=n)
    t0 = rng.integers(0, ds.T - K + 1, size=n)
    return ep, t0


def sample_snippet(ds: Dataset, rng: np.random.Generator, K: int) -> Snippet:
    ep, t0 = sample_starts(ds, rng, K, 1)
    e, t = int(ep[0]), int(t0[0])
    return Snippet(ds.states[e, t:t + K + 1].astype(float), ds.actions[e, t:t + K].astype(float))


def sample_batch(ds: Dataset, rng: np.random.Generator, K: int, n: int):
    """``n`` snippets as arrays ``(n, K+1, 12)`` and ``(n, K, 3)`` in float64."""
    ep, t0 = sample_starts(ds, rng, K, n)
    return gather(ds, ep, t0, K)


def gather(ds: Dataset, ep: np.ndarray, t0: np.ndarray, K: int):
    offs = np.arange(K + 1)
    states = ds.states[ep[:, None], t0[:, None] + offs[None, :]].astype(float)
    actions = ds.actions[ep[:, None], t0[:, None] + offs[None, :K]].astype(float)
    return states, actions


# ---------------------------------------------------------------------------
# delta normalisation


@dataclass(frozen=True)
class DeltaScale:
    scale: np.ndarray

    def __post_init__(self):
        if np.any(~(np.asarray(self.scale) > 0)):
            raise DatasetError("delta scales must be positive")


def delta_scale_from_deltas(deltas: np.ndarray) -> DeltaScale:
    s = np.percentile(np.abs(deltas), DELTA_PERCENTILE, axis=0)
    return DeltaScale(np.maximum(s, DELTA_FLOOR))


def compute_delta_stats(ds: Dataset, K: int, rng: np.random.Generator | None = None,
                        samples: int = DELTA_SAMPLES) -> DeltaScale:
    if ds.episode_count == 0:
        raise DatasetError("empty dataset")
    rng = np.random.default_rng(0) if rng is None else rng
    ep, t0 = sample_starts(ds, rng, K, samples)
    d = ds.states[ep, t0 + K].astype(float) - ds.states[ep, t0].astype(float)
    return delta_scale_from_deltas(d)


def normalize_delta(delta, scale) -> np.ndarray:
    scale = np.asarray(getattr(scale, "scale", scale), dtype=float)
    if np.any(~(scale > 0)):
        raise DatasetError("scale must be positive")
    return np.clip(np.asarray(delta, dtype=float) / scale, -1.0, 1.0)


def denormalize_delta(norm, scale) -> np.ndarray:
    scale = np.asarray(getattr(scale, "scale", scale), dtype=float)
    if np.any(~(scale > 0)):
        raise DatasetError("scale must be positive")
    return np.asarray(norm, dtype=float) * scale


def replay_episode(traj: Trajectory, noise: bool = True) -> Trajectory:
    """Re-simulate an episode from its recorded seed."""
    return generate_episode(traj.seed, noise, len(traj.actions))
