"""Planar grasp-and-place world with a red, a green and a blue object.

States are flat float64 vectors of length 12::

    [gx, gy, aperture, held_r, rx, ry, held_g, gx_g, gy_g, held_b, bx, by]

Actions are ``(dx, dy, dap)`` in [-1, 1].  The gripper moves 0.05 per unit
command, the aperture 0.2.  An object is grasped when the fingers are nearly
closed around it and dropped when they open; a dropped object falls to the
ground or onto an object directly below it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STATE_DIM = 12
ACTION_DIM = 3
GX, GY, AP = 0, 1, 2
COLORS = ("red", "green", "blue")
# (held flag, x, y) indices per object
OBJ = {"red": (3, 4, 5), "green": (6, 7, 8), "blue": (9, 10, 11)}

X_BOUNDS = (-1.0, 1.0)
Y_BOUNDS = (0.0, 1.0)
GROUND_Y = 0.05
STACK_DY = 0.10
MOVE_SCALE = 0.05
APERTURE_SCALE = 0.2
GRASP_RADIUS = 0.06
GRASP_APERTURE = 0.3
RELEASE_APERTURE = 0.7
SUPPORT_DX = 0.05
MOTION_NOISE = 0.005
MIN_OBJECT_SEPARATION = 0.15
# tolerance on the resting height when judging "c rests on d"; exact for
# simulated states, loose enough for model-predicted ones
REST_TOL = 0.02


class EnvError(ValueError):
    pass


def _rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def reset(seed_or_rng=None) -> np.ndarray:
    rng = _rng(seed_or_rng)
    s = np.zeros(STATE_DIM)
    s[GX] = rng.uniform(-0.8, 0.8)
    s[GY] = rng.uniform(0.2, 0.6)
    s[AP] = 1.0
    while True:
        xs = rng.uniform(-0.8, 0.8, size=3)
        d = np.abs(xs[:, None] - xs[None, :]) + np.eye(3)
        if d.min() >= MIN_OBJECT_SEPARATION:
            break
    for c, x in zip(COLORS, xs):
        _, ix, iy = OBJ[c]
        s[ix] = x
        s[iy] = GROUND_Y
    return s


def held_color(state) -> str | None:
    for c in COLORS:
        if state[OBJ[c][0]] > 0.5:
            return c
    return None


def _settle(s: np.ndarray, just_dropped: str | None) -> None:
    """Rest every non-held object on the ground or on top of a lower one."""
    free = [c for c in COLORS if s[OBJ[c][0]] < 0.5]
    order = sorted(free, key=lambda c: (s[OBJ[c][2]], c == just_dropped, COLORS.index(c)))
    placed: list[str] = []
    for c in order:
        _, ix, iy = OBJ[c]
        y = GROUND_Y
        for d in placed:
            _, jx, jy = OBJ[d]
            if abs(s[ix] - s[jx]) < SUPPORT_DX:
                y = max(y, s[jy] + STACK_DY)
        s[iy] = y
        placed.append(c)


def step(state, action, rng: np.random.Generator | None = None, noise_std: float = 0.0) -> np.ndarray:
    """Advance one primitive step.  Noise is drawn from ``rng`` only when ``noise_std > 0``."""
    a = np.asarray(action, dtype=float)
    if a.shape != (ACTION_DIM,) or not np.all(np.isfinite(a)):
        raise EnvError(f"action must be {ACTION_DIM} finite numbers, got {action!r}")
    a = np.clip(a, -1.0, 1.0)
    s = np.array(state, dtype=float)

    gx = s[GX] + MOVE_SCALE * a[0]
    gy = s[GY] + MOVE_SCALE * a[1]
    if noise_std > 0.0:
        if rng is None:
            raise EnvError("motion noise requested without a random stream")
        n = rng.normal(0.0, noise_std, size=2)
        gx += n[0]
        gy += n[1]
    s[GX] = min(max(gx, X_BOUNDS[0]), X_BOUNDS[1])
    s[GY] = min(max(gy, Y_BOUNDS[0]), Y_BOUNDS[1])
    s[AP] = min(max(s[AP] + APERTURE_SCALE * a[2], 0.0), 1.0)

    dropped = None
    held = held_color(s)
    if held is not None and s[AP] > RELEASE_APERTURE:
        s[OBJ[held][0]] = 0.0
        dropped, held = held, None
    if held is None and s[AP] < GRASP_APERTURE:
        best, best_d = None, GRASP_RADIUS
        for c in COLORS:
            _, ix, iy = OBJ[c]
            d = np.hypot(s[GX] - s[ix], s[GY] - s[iy])
            if d < best_d:
                best, best_d = c, d
        if best is not None:
            s[OBJ[best][0]] = 1.0
            held = best
    if held is not None:
        _, ix, iy = OBJ[held]
        s[ix] = s[GX]
        s[iy] = s[GY]
    _settle(s, dropped)
    return s


# ---------------------------------------------------------------------------
# tasks


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str  # reach | lift | hover | stack | bring
    obj: str
    ref: str | None = None
    target: tuple[float, float] | None = None
    scale: float = 0.5


TASKS: dict[str, TaskSpec] = {t.name: t for t in (
    TaskSpec("reach_red", "reach", "red", scale=0.5),
    TaskSpec("lift_red", "lift", "red", scale=0.35),
    TaskSpec("red_hover_blue", "hover", "red", "blue", scale=0.3),
    TaskSpec("red_stack_blue", "stack", "red", "blue", scale=0.3),
    TaskSpec("red_hover_green", "hover", "red", "green", scale=0.3),
    TaskSpec("red_stack_green", "stack", "red", "green", scale=0.3),
    TaskSpec("bring_red", "bring", "red", target=(0.6, GROUND_Y), scale=0.5),
    TaskSpec("reach_green", "reach", "green", scale=0.5),
    TaskSpec("lift_green", "lift", "green", scale=0.35),
)}
TASK_NAMES = tuple(TASKS)
IN_DISTRIBUTION_TASKS = ("reach_red", "lift_red", "red_hover_blue")


def get_task(task) -> TaskSpec:
    if isinstance(task, TaskSpec):
        return task
    try:
        return TASKS[task]
    except KeyError:
        raise EnvError(f"unknown task {task!r}; expected one of {', '.join(TASKS)}") from None


def reward(task, states) -> np.ndarray | float:
    """Task reward in [0, 1]; vectorised over any leading axes of ``states``."""
    t = get_task(task)
    s = np.asarray(states, dtype=float)
    h, ix, iy = OBJ[t.obj]
    ox, oy = s[..., ix], s[..., iy]
    if t.kind == "reach":
        r = 1.0 - np.hypot(s[..., GX] - ox, s[..., GY] - oy) / t.scale
    elif t.kind == "lift":
        r = (oy - GROUND_Y) / t.scale
    elif t.kind == "bring":
        r = 1.0 - np.hypot(ox - t.target[0], oy - t.target[1]) / t.scale
    else:
        _, jx, jy = OBJ[t.ref]
        lift = 0.15 if t.kind == "hover" else STACK_DY
        r = 1.0 - np.hypot(ox - s[..., jx], oy - (s[..., jy] + lift)) / t.scale
        if t.kind == "stack":
            rests = ((s[..., h] < 0.5) & (np.abs(ox - s[..., jx]) < SUPPORT_DX)
                     & (np.abs(oy - (s[..., jy] + STACK_DY)) < REST_TOL))
            r = 0.5 * np.clip(r, 0.0, 1.0) + 0.5 * rests
    r = np.clip(r, 0.0, 1.0)
    return float(r) if np.ndim(r) == 0 else r


# ---------------------------------------------------------------------------
# scripted base policies

BASE_POLICIES = (
    "open_fingers", "close_fingers", "reach_red", "lift_red", "red_hover_blue",
    "move_pinch_x_inc", "move_pinch_x_dec", "move_pinch_y_inc", "move_pinch_y_dec",
)
POLICY_GAIN = 5.0
LIFT_HEIGHT = 0.45
HOVER_DY = 0.15
LIFTED_Y = 0.18


def _toward(state, x, y) -> tuple[float, float]:
    dx = np.clip(POLICY_GAIN * (x - state[GX]), -1.0, 1.0)
    dy = np.clip(POLICY_GAIN * (y - state[GY]), -1.0, 1.0)
    return float(dx), float(dy)


def scripted_reach(state, color: str) -> np.ndarray:
    """Proportional reach toward an object with the fingers open."""
    _, ix, iy = OBJ[color]
    return np.array([*_toward(state, state[ix], state[iy]), 1.0])


def _lift_red(state) -> np.ndarray:
    h, ix, iy = OBJ["red"]
    if state[h] > 0.5:
        return np.array([*_toward(state, state[GX], LIFT_HEIGHT), -1.0])
    dist = np.hypot(state[GX] - state[ix], state[GY] - state[iy])
    fingers = -1.0 if dist < GRASP_RADIUS else 1.0
    return np.array([*_toward(state, state[ix], state[iy]), fingers])


def base_policy_action(policy: str | int, state) -> np.ndarray:
    name = BASE_POLICIES[policy] if isinstance(policy, (int, np.integer)) else policy
    if name == "open_fingers":
        return np.array([0.0, 0.0, 1.0])
    if name == "close_fingers":
        return np.array([0.0, 0.0, -1.0])
    if name == "reach_red":
        return scripted_reach(state, "red")
    if name == "lift_red":
        return _lift_red(state)
    if name == "red_hover_blue":
        h, _, iy = OBJ["red"]
        if state[h] > 0.5 and state[iy] > LIFTED_Y:
            _, bx, by = OBJ["blue"]
            return np.array([*_toward(state, state[bx], state[by] + HOVER_DY), -1.0])
        return _lift_red(state)
    moves = {
        "move_pinch_x_inc": (1.0, 0.0), "move_pinch_x_dec": (-1.0, 0.0),
        "move_pinch_y_inc": (0.0, 1.0), "move_pinch_y_dec": (0.0, -1.0),
    }
    if name in moves:
        return np.array([*moves[name], 0.0])
    raise EnvError(f"unknown base policy {policy!r}")


def task_reference_policy(task: str):
    """Scripted controller used as the reference column for a task, or None."""
    return {"reach_red": "reach_red", "lift_red": "lift_red", "red_hover_blue": "red_hover_blue"}.get(task)
