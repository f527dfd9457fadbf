"""Small dense-network substrate: layers, a reverse-mode tape, Adam and a
finite-difference gradient checker.

Everything works on float64 numpy arrays with a leading batch axis.  A
:class:`Tape` records primitive operations during a forward pass so that
:func:`backward` can replay them in reverse.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

ELU_ALPHA = 1.0
LN_EPS = 1e-5
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


class ShapeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


class ContractError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# layer specs and parameters


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "linear" | "layer_norm" | "elu" | "tanh"
    in_dim: int
    out_dim: int

    def __post_init__(self):
        if self.kind not in ("linear", "layer_norm", "elu", "tanh"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ShapeError("layer dims must be positive")
        if self.kind != "linear" and self.in_dim != self.out_dim:
            raise ShapeError(f"{self.kind} layer must preserve width")


@dataclass
class MlpParams:
    """A chain of layers plus the arrays backing them.

    Array names are ``"{name}.{i}.weight"`` / ``.bias`` for linear layers and
    ``.gain`` / ``.bias`` for layer norms, so several networks can share one
    flat parameter dict.
    """

    name: str
    layers: tuple[LayerSpec, ...]
    arrays: dict[str, np.ndarray]

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"{self.name}: layer dims do not chain ({a} -> {b})")
        for i, spec in enumerate(self.layers):
            for key, shape in _param_shapes(spec).items():
                arr = self.arrays.get(f"{self.name}.{i}.{key}")
                if arr is None or arr.shape != shape:
                    raise ShapeError(f"{self.name}.{i}.{key}: expected shape {shape}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def param_names(self) -> list[str]:
        return [f"{self.name}.{i}.{k}" for i, s in enumerate(self.layers) for k in _param_shapes(s)]


def _param_shapes(spec: LayerSpec) -> dict[str, tuple[int, ...]]:
    if spec.kind == "linear":
        return {"weight": (spec.in_dim, spec.out_dim), "bias": (spec.out_dim,)}
    if spec.kind == "layer_norm":
        return {"gain": (spec.in_dim,), "bias": (spec.in_dim,)}
    return {}


def build_layers(in_dim: int, widths: Sequence[int], *, layer_norm_after_first=False,
                 final_activation: str | None = "elu") -> tuple[LayerSpec, ...]:
    """Linear layers of the given widths with ELU between them.

    ``final_activation`` applies after the last linear (``None``, ``"elu"`` or
    ``"tanh"``).
    """
    layers: list[LayerSpec] = []
    d = in_dim
    for i, w in enumerate(widths):
        layers.append(LayerSpec("linear", d, w))
        if i == 0 and layer_norm_after_first:
            layers.append(LayerSpec("layer_norm", w, w))
        last = i == len(widths) - 1
        act = final_activation if last else "elu"
        if act is not None:
            layers.append(LayerSpec(act, w, w))
        d = w
    return tuple(layers)


def init_mlp(name: str, layers: Sequence[LayerSpec], rng: np.random.Generator,
             final_scale: float = 1.0) -> MlpParams:
    arrays: dict[str, np.ndarray] = {}
    linear_idx = [i for i, s in enumerate(layers) if s.kind == "linear"]
    for i, spec in enumerate(layers):
        if spec.kind == "linear":
            # variance-preserving uniform init
            bound = math.sqrt(3.0 / spec.in_dim)
            if i == linear_idx[-1]:
                bound *= final_scale
            arrays[f"{name}.{i}.weight"] = rng.uniform(-bound, bound, (spec.in_dim, spec.out_dim))
            arrays[f"{name}.{i}.bias"] = np.zeros(spec.out_dim)
        elif spec.kind == "layer_norm":
            arrays[f"{name}.{i}.gain"] = np.ones(spec.in_dim)
            arrays[f"{name}.{i}.bias"] = np.zeros(spec.in_dim)
    return MlpParams(name, tuple(layers), arrays)


# ---------------------------------------------------------------------------
# numeric primitives shared by the plain and the taped forward passes


def elu(x: np.ndarray) -> np.ndarray:
    # max(x, 0) + alpha * expm1(min(x, 0)); written in place, it is the hot loop of planning
    neg = np.minimum(x, 0.0)
    np.expm1(neg, out=neg)
    if ELU_ALPHA != 1.0:
        neg *= ELU_ALPHA
    out = np.maximum(x, 0.0)
    out += neg
    return out


def as_real(x) -> np.ndarray:
    """``x`` as an array, keeping its floating dtype and promoting anything else to float64."""
    x = np.asarray(x)
    return x if np.issubdtype(x.dtype, np.floating) else x.astype(np.float64)


def layer_norm(x, gain, bias, eps: float = LN_EPS):
    x = as_real(x)
    gain = np.asarray(gain, dtype=x.dtype)
    bias = np.asarray(bias, dtype=x.dtype)
    if x.shape[-1] != gain.shape[-1] or gain.shape != bias.shape:
        raise ShapeError("layer_norm: length mismatch")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gain + bias


def mlp_forward(params: MlpParams, x, tape: "Tape | None" = None):
    """Evaluate the network on ``x`` (a vector or a batch of row vectors).

    With a tape, ``x`` may be a :class:`Node` and the result is a Node whose
    intermediates are recorded for :func:`backward`.
    """
    if tape is not None:
        return _mlp_forward_taped(params, x, tape)
    x = as_real(x)
    vec = x.ndim == 1
    h = x[None, :] if vec else x
    if h.shape[-1] != params.in_dim:
        raise ShapeError(f"{params.name}: expected input width {params.in_dim}, got {h.shape[-1]}")
    a = params.arrays
    for i, spec in enumerate(params.layers):
        if spec.kind == "linear":
            h = h @ a[f"{params.name}.{i}.weight"]
            h += a[f"{params.name}.{i}.bias"]
        elif spec.kind == "layer_norm":
            h = layer_norm(h, a[f"{params.name}.{i}.gain"], a[f"{params.name}.{i}.bias"])
        elif spec.kind == "elu":
            h = elu(h)
        else:
            h = np.tanh(h)
    return h[0] if vec else h


def _mlp_forward_taped(params: MlpParams, x, tape: "Tape"):
    h = x if isinstance(x, Node) else tape.const(np.atleast_2d(np.asarray(x, dtype=float)))
    if h.value.shape[-1] != params.in_dim:
        raise ShapeError(f"{params.name}: expected input width {params.in_dim}, got {h.value.shape[-1]}")
    a = params.arrays
    for i, spec in enumerate(params.layers):
        p = f"{params.name}.{i}"
        if spec.kind == "linear":
            h = tape.linear(h, tape.param(f"{p}.weight", a[f"{p}.weight"]),
                            tape.param(f"{p}.bias", a[f"{p}.bias"]))
        elif spec.kind == "layer_norm":
            h = tape.layer_norm(h, tape.param(f"{p}.gain", a[f"{p}.gain"]),
                                tape.param(f"{p}.bias", a[f"{p}.bias"]))
        elif spec.kind == "elu":
            h = tape.elu(h)
        else:
            h = tape.tanh(h)
    return h


# ---------------------------------------------------------------------------
# reverse mode


class Node:
    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value: np.ndarray, requires_grad: bool = True):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tape:
    """Records primitive ops; each entry is ``(inputs, output, vjp)``."""

    def __init__(self):
        self._ops: list[tuple[tuple[Node, ...], Node, Callable]] = []
        self.params: dict[str, Node] = {}

    # leaves ---------------------------------------------------------------
    def param(self, name: str, array: np.ndarray) -> Node:
        node = self.params.get(name)
        if node is None:
            node = Node(array)
            self.params[name] = node
        return node

    def const(self, array) -> Node:
        return Node(np.asarray(array, dtype=float), requires_grad=False)

    def _record(self, inputs, value, vjp) -> Node:
        out = Node(value, any(n.requires_grad for n in inputs))
        if out.requires_grad:
            self._ops.append((tuple(inputs), out, vjp))
        return out

    # ops ------------------------------------------------------------------
    def linear(self, x: Node, w: Node, b: Node) -> Node:
        xv, wv = x.value, w.value
        return self._record((x, w, b), xv @ wv + b.value,
                            lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)))

    def layer_norm(self, x: Node, gain: Node, bias: Node, eps: float = LN_EPS) -> Node:
        xv = x.value
        n = xv.shape[-1]
        mu = xv.mean(axis=-1, keepdims=True)
        xc = xv - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        gv = gain.value

        def vjp(g):
            dxhat = g * gv
            dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
            red = tuple(range(g.ndim - 1))
            return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

        return self._record((x, gain, bias), xc / np.sqrt(var + eps) * gv + bias.value, vjp)

    def elu(self, x: Node) -> Node:
        y = elu(x.value)
        slope = np.where(x.value > 0, 1.0, y + ELU_ALPHA)
        return self._record((x,), y, lambda g: (g * slope,))

    def tanh(self, x: Node) -> Node:
        y = np.tanh(x.value)
        return self._record((x,), y, lambda g: (g * (1.0 - y * y),))

    def exp(self, x: Node) -> Node:
        y = np.exp(x.value)
        return self._record((x,), y, lambda g: (g * y,))

    def add(self, a: Node, b: Node) -> Node:
        sa, sb = a.shape, b.shape
        return self._record((a, b), a.value + b.value,
                            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def sub(self, a: Node, b: Node) -> Node:
        sa, sb = a.shape, b.shape
        return self._record((a, b), a.value - b.value,
                            lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))

    def mul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        return self._record((a, b), av * bv,
                            lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))

    def scale(self, x: Node, c: float) -> Node:
        return self._record((x,), x.value * c, lambda g: (g * c,))

    def square(self, x: Node) -> Node:
        xv = x.value
        return self._record((x,), xv * xv, lambda g: (2.0 * g * xv,))

    def clip(self, x: Node, lo: float, hi: float) -> Node:
        inside = (x.value >= lo) & (x.value <= hi)
        return self._record((x,), np.clip(x.value, lo, hi), lambda g: (g * inside,))

    def sum(self, x: Node) -> Node:
        shape = x.shape
        return self._record((x,), np.asarray(x.value.sum()),
                            lambda g: (np.broadcast_to(g, shape).copy(),))

    def row_sum(self, x: Node) -> Node:
        """Sum over every axis but the first."""
        shape = x.shape
        axes = tuple(range(1, x.value.ndim))
        return self._record((x,), x.value.sum(axis=axes),
                            lambda g: (np.broadcast_to(g.reshape((-1,) + (1,) * len(axes)), shape).copy(),))

    def broadcast(self, x: Node, shape) -> Node:
        old = x.shape
        return self._record((x,), np.broadcast_to(x.value, shape), lambda g: (_unbroadcast(g, old),))

    def reshape(self, x: Node, shape) -> Node:
        old = x.shape
        return self._record((x,), x.value.reshape(shape), lambda g: (g.reshape(old),))

    def columns(self, x: Node, start: int, stop: int) -> Node:
        shape = x.shape

        def vjp(g):
            out = np.zeros(shape)
            out[..., start:stop] = g
            return (out,)

        return self._record((x,), x.value[..., start:stop], vjp)

    def take(self, x: Node, index) -> Node:
        """``x[index]`` along the leading axes (basic indexing only)."""
        shape = x.shape

        def vjp(g):
            out = np.zeros(shape)
            out[index] = g
            return (out,)

        return self._record((x,), x.value[index], vjp)

    def concat(self, nodes: Sequence[Node], axis: int = -1) -> Node:
        sizes = [n.shape[axis] for n in nodes]
        splits = np.cumsum(sizes)[:-1]
        return self._record(tuple(nodes), np.concatenate([n.value for n in nodes], axis=axis),
                            lambda g: tuple(np.split(g, splits, axis=axis)))


def backward(tape: Tape, loss: Node, loss_seed: float = 1.0) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(param) for every parameter registered on the tape.

    Parameters that the loss does not depend on get exact zeros.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    loss.grad = np.full(loss.value.shape, float(loss_seed))
    for inputs, out, vjp in reversed(tape._ops):
        if out.grad is None:
            continue
        grads = vjp(out.grad)
        for node, g in zip(inputs, grads):
            if not node.requires_grad:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
    return {name: (np.zeros_like(n.value) if n.grad is None else n.grad)
            for name, n in tape.params.items()}


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied in place.  Returns ``(params, state)``."""
    if state.step < 0:
        raise ValueError("Adam step counter must be non-negative")
    for name, g in grads.items():
        if name not in params or params[name].shape != g.shape:
            raise ShapeError(f"adam_step: gradient {name!r} does not match a parameter")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# finite differences


def grad_check_errors(params: dict[str, np.ndarray],
                      loss_fn: Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]],
                      probe_count: int, fd_step: float = 1e-6,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """Relative errors of the analytic gradient at ``probe_count`` random coordinates."""
    if probe_count < 1:
        raise ValueError("probe_count must be >= 1")
    if fd_step <= 0:
        raise ValueError("fd_step must be positive")
    names = [n for n in sorted(params) if params[n].size > 0]
    if not names:
        raise ValueError("grad_check needs at least one parameter")
    rng = np.random.default_rng(0) if rng is None else rng
    loss0, grads = loss_fn(params)
    if not np.isfinite(loss0):
        raise NumericalError("loss is not finite")
    sizes = np.array([params[n].size for n in names])
    flat_pick = rng.choice(sizes.sum(), size=min(probe_count, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    errors = []
    for k in flat_pick:
        j = int(np.searchsorted(bounds, k, side="right"))
        name = names[j]
        idx = int(k - (bounds[j - 1] if j else 0))
        arr = params[name].reshape(-1)
        old = arr[idx]
        arr[idx] = old + fd_step
        up, _ = loss_fn(params)
        arr[idx] = old - fd_step
        down, _ = loss_fn(params)
        arr[idx] = old
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericalError(f"loss not finite while probing {name}[{idx}]")
        fd = (up - down) / (2.0 * fd_step)
        an = float(grads[name].reshape(-1)[idx])
        errors.append(abs(an - fd) / max(abs(an), abs(fd), 1e-8))
    return np.asarray(errors)


def grad_check(params, loss_fn, probe_count: int, fd_step: float = 1e-6, rng=None) -> float:
    """Max relative error between analytic and central-difference gradients."""
    return float(grad_check_errors(params, loss_fn, probe_count, fd_step, rng).max())


# ---------------------------------------------------------------------------
# diagonal Gaussians


@dataclass(frozen=True)
class DiagGaussian:
    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        if np.shape(self.mean) != np.shape(self.log_std):
            raise ShapeError("mean and log_std lengths differ")

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError("non-finite Gaussian parameters")


def gaussian_kl_to_standard(q: DiagGaussian) -> float | np.ndarray:
    """KL(q || N(0, I)); sums over the last axis."""
    mu, ls = np.asarray(q.mean, float), np.asarray(q.log_std, float)
    _check_finite(mu, ls)
    return 0.5 * np.sum(mu * mu + np.exp(2.0 * ls) - 1.0 - 2.0 * ls, axis=-1)


def gaussian_sample(q: DiagGaussian, rng: np.random.Generator) -> np.ndarray:
    mu, ls = np.asarray(q.mean, float), np.asarray(q.log_std, float)
    _check_finite(mu, ls)
    eps = rng.standard_normal(mu.shape)
    # reparameterised: differentiable in (mean, log_std) for a fixed eps
    return mu + np.exp(ls) * eps


def gaussian_log_prob(q: DiagGaussian, x) -> float | np.ndarray:
    mu, ls = np.asarray(q.mean, float), np.asarray(q.log_std, float)
    _check_finite(mu, ls)
    z = (np.asarray(x, float) - mu) * np.exp(-ls)
    return np.sum(-0.5 * z * z - ls - 0.5 * math.log(2.0 * math.pi), axis=-1)


def taped_kl_to_standard(tape: Tape, mean: Node, log_std: Node) -> Node:
    """Per-row KL(N(mean, exp(log_std)^2) || N(0, I)) recorded on the tape."""
    var = tape.exp(tape.scale(log_std, 2.0))
    inner = tape.sub(tape.add(tape.square(mean), var), tape.scale(log_std, 2.0))
    return tape.scale(tape.add(tape.row_sum(inner), tape.const(-float(mean.shape[-1]))), 0.5)


def iter_params(mlps: Iterable[MlpParams]) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for m in mlps:
        out.update(m.arrays)
    return out
