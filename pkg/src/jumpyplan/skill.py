"""Latent-skill model: state embedder, snippet encoder, action decoder and
jumpy (K-step) state decoder, trained jointly as a VAE over snippets."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import checkpoint, env
from .dataset import Dataset, DeltaScale, compute_delta_stats, denormalize_delta, sample_batch
from .nn import (LOG_STD_MAX, LOG_STD_MIN, AdamState, DiagGaussian, MlpParams, NumericalError,
                 ShapeError, Tape, adam_step, backward, build_layers, init_mlp, mlp_forward,
                 taped_kl_to_standard)

log = logging.getLogger(__name__)

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class SkillModelConfig:
    K: int = 10
    feature_dim: int = 32
    latent_dim: int = 8
    hidden: int = 64
    beta_a: float = 1.0
    beta_s: float = 10.0
    beta_kl: float = 0.01
    lr: float = 1e-3
    batch_size: int = 64
    total_steps: int = 20000
    log_every: int = 100
    time_aggregation: str = "concat"  # concat | sum

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if min(self.feature_dim, self.latent_dim, self.hidden) < 1:
            raise ValueError("network widths must be >= 1")
        if min(self.beta_a, self.beta_s, self.beta_kl) < 0:
            raise ValueError("loss coefficients must be non-negative")
        if self.lr <= 0 or self.batch_size < 1 or self.total_steps < 0 or self.log_every < 1:
            raise ValueError("invalid optimisation settings")
        if self.time_aggregation not in ("concat", "sum"):
            raise ValueError(f"unknown time_aggregation {self.time_aggregation!r}")


@dataclass
class LossBreakdown:
    kl: float
    action_nll: float
    state_nll: float
    total: float


class SkillModel:
    """All learned pieces plus the delta scale used by the jumpy decoder."""

    NETS = ("embed", "time_mix", "encoder", "action_dec", "jumpy_dec")

    def __init__(self, config: SkillModelConfig, nets: dict[str, MlpParams], delta_scale: DeltaScale):
        self.config = config
        self.nets = nets
        self.delta_scale = delta_scale
        self.params: dict[str, np.ndarray] = {}
        for name in self.NETS:
            self.params.update(nets[name].arrays)
        # the nets view the same arrays as the flat dict
        for name in self.NETS:
            nets[name].arrays = self.params
        self._check()

    def _check(self):
        c = self.config
        F, L = c.feature_dim, c.latent_dim
        expect = {
            "embed": (env.STATE_DIM, F), "time_mix": (F, F),
            "encoder": ((c.K + 1) * F if c.time_aggregation == "concat" else F, 2 * L),
            "action_dec": (F + L, env.ACTION_DIM), "jumpy_dec": (F + L, env.STATE_DIM),
        }
        for name, (i, o) in expect.items():
            n = self.nets[name]
            if (n.in_dim, n.out_dim) != (i, o):
                raise ShapeError(f"{name}: expected {i}->{o}, got {n.in_dim}->{n.out_dim}")

    @classmethod
    def init(cls, config: SkillModelConfig, delta_scale: DeltaScale, rng: np.random.Generator) -> "SkillModel":
        c = config
        H, F, L = c.hidden, c.feature_dim, c.latent_dim
        enc_in = (c.K + 1) * F if c.time_aggregation == "concat" else F
        nets = {
            "embed": init_mlp("embed", build_layers(env.STATE_DIM, (H, H, F), layer_norm_after_first=True), rng),
            "time_mix": init_mlp("time_mix", build_layers(F, (F,)), rng),
            "encoder": init_mlp("encoder", build_layers(enc_in, (H, H, 2 * L), final_activation=None), rng,
                                final_scale=0.1),
            "action_dec": init_mlp("action_dec", build_layers(F + L, (H, H, H, H, env.ACTION_DIM),
                                                              final_activation=None), rng, final_scale=0.1),
            "jumpy_dec": init_mlp("jumpy_dec", build_layers(F + L, (H, H, H, H, env.STATE_DIM),
                                                            final_activation="tanh"), rng, final_scale=0.1),
        }
        return cls(c, nets, delta_scale)

    def copy(self) -> "SkillModel":
        params = {k: v.copy() for k, v in self.params.items()}
        new_nets = {name: MlpParams(n.name, n.layers, {k: params[k] for k in n.param_names()})
                    for name, n in self.nets.items()}
        return SkillModel(self.config, new_nets, DeltaScale(self.delta_scale.scale.copy()))

    @property
    def K(self) -> int:
        return self.config.K

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def param_names(self, *nets: str) -> list[str]:
        return [k for n in nets for k in self.nets[n].param_names()]

    # serialisation -----------------------------------------------------
    def save(self, path) -> str:
        arrays = dict(self.params)
        arrays["delta_scale"] = self.delta_scale.scale
        layers = {n: [[s.kind, s.in_dim, s.out_dim] for s in self.nets[n].layers] for n in self.NETS}
        return checkpoint.save(path, arrays, {"config": asdict(self.config), "layers": layers})

    @classmethod
    def load(cls, path) -> "SkillModel":
        from .nn import LayerSpec

        arrays, meta = checkpoint.load(path)
        config = SkillModelConfig(**meta["config"])
        scale = DeltaScale(arrays.pop("delta_scale"))
        nets = {}
        for n in cls.NETS:
            layers = tuple(LayerSpec(k, i, o) for k, i, o in meta["layers"][n])
            names = [f"{n}.{i}.{k}" for i, s in enumerate(layers)
                     for k in (("weight", "bias") if s.kind == "linear" else
                               ("gain", "bias") if s.kind == "layer_norm" else ())]
            nets[n] = MlpParams(n, layers, {k: arrays[k] for k in names})
        return cls(config, nets, scale)


# ---------------------------------------------------------------------------
# inference


def embed_state(model: SkillModel, s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if s.shape[-1] != env.STATE_DIM:
        raise ShapeError(f"state must have {env.STATE_DIM} entries")
    flat = s.reshape(-1, env.STATE_DIM)
    out = mlp_forward(model.nets["embed"], flat)
    return out.reshape(s.shape[:-1] + (model.config.feature_dim,))


def _aggregate(model: SkillModel, feats: np.ndarray) -> np.ndarray:
    """feats: (B, K+1, F) -> encoder input."""
    B, T1, F = feats.shape
    mixed = mlp_forward(model.nets["time_mix"], feats.reshape(B * T1, F)).reshape(B, T1, F)
    if model.config.time_aggregation == "sum":
        return mixed.sum(axis=1)
    return mixed.reshape(B, T1 * F)


def encode(model: SkillModel, snippet_states) -> DiagGaussian:
    """Posterior over z for one snippet (K+1, 12) or a batch (B, K+1, 12)."""
    x = np.asarray(snippet_states, dtype=float)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.shape[1:] != (model.K + 1, env.STATE_DIM):
        raise ShapeError(f"snippet must have shape ({model.K + 1}, {env.STATE_DIM}), got {x.shape[1:]}")
    out = mlp_forward(model.nets["encoder"], _aggregate(model, embed_state(model, x)))
    L = model.latent_dim
    mean, log_std = out[:, :L], np.clip(out[:, L:], LOG_STD_MIN, LOG_STD_MAX)
    if single:
        mean, log_std = mean[0], log_std[0]
    return DiagGaussian(mean, log_std)


def _decode(model: SkillModel, net: str, s, z, feats=None) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != model.latent_dim:
        raise ShapeError(f"z must have {model.latent_dim} entries")
    f = embed_state(model, s) if feats is None else np.asarray(feats, dtype=float)
    lead = np.broadcast_shapes(f.shape[:-1], z.shape[:-1])
    x = np.concatenate([np.broadcast_to(f, lead + f.shape[-1:]),
                        np.broadcast_to(z, lead + z.shape[-1:])], axis=-1)
    out = mlp_forward(model.nets[net], x.reshape(-1, x.shape[-1]))
    return out.reshape(lead + (out.shape[-1],))


def decode_action(model: SkillModel, s, z, clamp: bool = True) -> np.ndarray:
    """Mean action of the skill-conditioned low-level policy."""
    a = _decode(model, "action_dec", s, z)
    return np.clip(a, -1.0, 1.0) if clamp else a


def decode_jumpy(model: SkillModel, s, z, feats=None) -> np.ndarray:
    """Predicted state K steps ahead: s + scale * tanh(net(phi(s), z))."""
    s = np.asarray(s, dtype=float)
    norm = _decode(model, "jumpy_dec", s, z, feats)
    return s + denormalize_delta(norm, model.delta_scale)


# ---------------------------------------------------------------------------
# training objective


def loss(model: SkillModel, states, actions, rng: np.random.Generator | None = None,
         eps: np.ndarray | None = None):
    """Build the taped objective on a batch of snippets.

    ``states``: (B, K+1, 12); ``actions``: (B, K, 3).  Returns
    ``(LossBreakdown, tape, total_node)``; call :func:`nn.backward` on the tape
    for gradients.  ``eps`` fixes the reparameterisation noise (B, latent_dim).
    """
    c = model.config
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions, dtype=float)
    if states.ndim != 3 or states.shape[1:] != (c.K + 1, env.STATE_DIM):
        raise ShapeError(f"states must be (B, {c.K + 1}, {env.STATE_DIM})")
    B = states.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    if actions.shape != (B, c.K, env.ACTION_DIM):
        raise ShapeError(f"actions must be (B, {c.K}, {env.ACTION_DIM})")
    F, L, K = c.feature_dim, c.latent_dim, c.K
    if eps is None:
        eps = (rng or np.random.default_rng()).standard_normal((B, L))

    tape = Tape()
    feats = mlp_forward(model.nets["embed"], tape.const(states.reshape(B * (K + 1), env.STATE_DIM)), tape)
    mixed = mlp_forward(model.nets["time_mix"], feats, tape)
    if c.time_aggregation == "sum":
        enc_in = _sum_over_time(tape, mixed, B, K + 1, F)
    else:
        enc_in = tape.reshape(mixed, (B, (K + 1) * F))
    out = mlp_forward(model.nets["encoder"], enc_in, tape)
    mean = tape.columns(out, 0, L)
    log_std = tape.clip(tape.columns(out, L, 2 * L), LOG_STD_MIN, LOG_STD_MAX)
    z = tape.add(mean, tape.mul(tape.exp(log_std), tape.const(eps)))
    kl = taped_kl_to_standard(tape, mean, log_std)  # (B,)

    feats3 = tape.reshape(feats, (B, K + 1, F))
    # action decoder on (phi_{t+k}, z), k < K
    fa = tape.reshape(tape.take(feats3, (slice(None), slice(0, K))), (B * K, F))
    za = tape.reshape(tape.broadcast(tape.reshape(z, (B, 1, L)), (B, K, L)), (B * K, L))
    a_hat = mlp_forward(model.nets["action_dec"], tape.concat([fa, za], axis=1), tape)
    a_err = tape.sub(a_hat, tape.const(actions.reshape(B * K, env.ACTION_DIM)))
    a_nll = tape.scale(tape.row_sum(tape.reshape(tape.square(a_err), (B, K * env.ACTION_DIM))), 0.5)

    # jumpy decoder on (phi_t, z)
    f0 = tape.take(feats3, (slice(None), 0))
    pred = mlp_forward(model.nets["jumpy_dec"], tape.concat([f0, z], axis=1), tape)
    target = np.clip((states[:, K] - states[:, 0]) / model.delta_scale.scale, -1.0, 1.0)
    s_err = tape.sub(pred, tape.const(target))
    s_nll = tape.scale(tape.row_sum(tape.square(s_err)), 0.5)

    per = tape.add(tape.add(tape.scale(kl, c.beta_kl), tape.scale(a_nll, c.beta_a)), tape.scale(s_nll, c.beta_s))
    total = tape.scale(tape.sum(per), 1.0 / B)
    bd = LossBreakdown(float(kl.value.mean()), float(a_nll.value.mean()), float(s_nll.value.mean()),
                       float(total.value))
    if not np.isfinite(bd.total):
        raise NumericalError(f"non-finite loss on a batch of {B} snippets: {bd}")
    return bd, tape, total


def _sum_over_time(tape: Tape, mixed, B, T1, F):
    x = tape.reshape(mixed, (B, T1, F))
    parts = [tape.take(x, (slice(None), t)) for t in range(T1)]
    acc = parts[0]
    for p in parts[1:]:
        acc = tape.add(acc, p)
    return acc


def loss_and_grads(model: SkillModel, states, actions, eps) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    bd, tape, total = loss(model, states, actions, eps=eps)
    grads = backward(tape, total)
    return bd, {k: grads.get(k, np.zeros_like(v)) for k, v in model.params.items()}


def closed_form_objective(model: SkillModel, states, actions, eps) -> float:
    """The same objective assembled from Gaussian log-densities (unit variance).

    Differs from :func:`loss` only by the normalising constants of the two
    decoder likelihoods.
    """
    from .nn import gaussian_kl_to_standard, gaussian_log_prob

    c = model.config
    q = encode(model, states)
    z = q.mean + np.exp(q.log_std) * eps
    kl = gaussian_kl_to_standard(q)
    feats = embed_state(model, states)
    a_hat = _decode(model, "action_dec", None, z[:, None, :].repeat(c.K, 1), feats[:, :c.K])
    lp_a = gaussian_log_prob(DiagGaussian(a_hat, np.zeros_like(a_hat)), actions).sum(axis=1)
    pred = _decode(model, "jumpy_dec", None, z, feats[:, 0])
    target = np.clip((states[:, c.K] - states[:, 0]) / model.delta_scale.scale, -1.0, 1.0)
    lp_s = gaussian_log_prob(DiagGaussian(pred, np.zeros_like(pred)), target)
    return float(np.mean(c.beta_kl * kl - c.beta_a * lp_a - c.beta_s * lp_s))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)  # every log_every steps, window means
    totals: list[float] = field(default_factory=list)  # every step


def train(dataset: Dataset, config: SkillModelConfig, seed: int,
          on_log: Callable[[dict], None] | None = None,
          delta_scale: DeltaScale | None = None) -> tuple[SkillModel, TrainLog]:
    """Adam on the joint objective over uniformly sampled snippet batches."""
    root = np.random.SeedSequence([seed, config.K])
    init_ss, stats_ss, batch_ss = root.spawn(3)
    if delta_scale is None:
        delta_scale = compute_delta_stats(dataset, config.K, np.random.default_rng(stats_ss))
    model = SkillModel.init(config, delta_scale, np.random.default_rng(init_ss))
    rng = np.random.default_rng(batch_ss)
    opt = AdamState(lr=config.lr)
    tlog = TrainLog()
    window: list[LossBreakdown] = []
    for step in range(config.total_steps):
        states, actions = sample_batch(dataset, rng, config.K, config.batch_size)
        eps = rng.standard_normal((config.batch_size, config.latent_dim))
        bd, tape, total = loss(model, states, actions, eps=eps)
        grads = backward(tape, total)
        adam_step(model.params, grads, opt)
        tlog.totals.append(bd.total)
        window.append(bd)
        if (step + 1) % config.log_every == 0:
            row = {"step": step + 1,
                   "kl": float(np.mean([w.kl for w in window])),
                   "action_term": float(np.mean([w.action_nll for w in window])),
                   "state_term": float(np.mean([w.state_nll for w in window])),
                   "total": float(np.mean([w.total for w in window]))}
            window.clear()
            tlog.rows.append(row)
            log.info("K=%d step %d total %.4f (kl %.3f act %.3f state %.3f)", config.K, row["step"],
                     row["total"], row["kl"], row["action_term"], row["state_term"])
            if on_log is not None:
                on_log(row)
    return model, tlog


# ---------------------------------------------------------------------------
# jumpy-decoder-only fitting (finetuning and the two-stage ablation)


def _jumpy_fit(model: SkillModel, s0, z, s1, steps: int, seed: int, batch_size: int, lr: float,
               validation=None, eval_every: int = 50) -> SkillModel:
    out = model.copy()
    if steps == 0:
        return out
    names = out.param_names("jumpy_dec")
    feats_all = embed_state(out, s0)
    target_all = np.clip((s1 - s0) / out.delta_scale.scale, -1.0, 1.0)
    rng = np.random.default_rng(seed)
    opt = AdamState(lr=lr)
    n = len(s0)
    best, best_err = None, None
    if validation is not None:
        best_err = jumpy_error(out, *validation)
        best = {k: out.params[k].copy() for k in names}
    for step in range(steps):
        idx = rng.integers(0, n, size=min(batch_size, n))
        tape = Tape()
        x = tape.const(np.concatenate([feats_all[idx], z[idx]], axis=1))
        pred = mlp_forward(out.nets["jumpy_dec"], x, tape)
        err = tape.sub(pred, tape.const(target_all[idx]))
        total = tape.scale(tape.sum(tape.square(err)), 0.5 / len(idx))
        grads = backward(tape, total)
        adam_step(out.params, {k: grads[k] for k in names}, opt)
        if validation is not None and ((step + 1) % eval_every == 0 or step + 1 == steps):
            e = jumpy_error(out, *validation)
            if e < best_err:
                best_err, best = e, {k: out.params[k].copy() for k in names}
    if validation is not None:
        for k in names:
            out.params[k][...] = best[k]
    return out


def jumpy_error(model: SkillModel, s0, z, s1) -> float:
    """Mean L2 distance between decode_jumpy(s0, z) and s1."""
    pred = decode_jumpy(model, s0, z)
    return float(np.linalg.norm(pred - s1, axis=-1).mean())


def finetune(model: SkillModel, triples, steps: int, seed: int, batch_size: int = 64, lr: float = 3e-4,
             validation=None) -> SkillModel:
    """Update only the jumpy decoder on executed ``(s_t, z_t, s_{t+K})`` triples.

    With ``validation`` triples the returned weights are the best seen on them
    (the starting weights included), so validation error never increases.
    """
    s0, z, s1 = (np.asarray(a, dtype=float) for a in triples)
    if len(s0) == 0:
        raise ValueError("finetune needs at least one triple")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    val = None if validation is None else tuple(np.asarray(a, dtype=float) for a in validation)
    return _jumpy_fit(model, s0, z, s1, steps, seed, batch_size, lr, val)


def fit_jumpy_decoder(model: SkillModel, dataset: Dataset, steps: int, seed: int,
                      batch_size: int = 64, lr: float | None = None) -> SkillModel:
    """Train a fresh jumpy decoder on a frozen embedder/encoder (posterior-mean z)."""
    rng = np.random.default_rng(seed)
    fresh = SkillModel.init(model.config, model.delta_scale, rng)
    out = model.copy()
    for k in out.param_names("jumpy_dec"):
        out.params[k][...] = fresh.params[k]
    n = max(batch_size * 50, 5000)
    states, _ = sample_batch(dataset, rng, model.K, n)
    z = encode(out, states).mean
    return _jumpy_fit(out, states[:, 0], z, states[:, -1], steps, seed + 1, batch_size,
                      lr or model.config.lr)
