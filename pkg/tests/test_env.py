import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jumpyplan import env
from jumpyplan.env import OBJ


def placed(kw=None):
    """A state with objects far apart on the ground and the gripper parked high."""
    s = np.zeros(env.STATE_DIM)
    s[env.GX], s[env.GY], s[env.AP] = 0.0, 0.8, 1.0
    for c, x in zip(env.COLORS, (-0.6, 0.0, 0.6)):
        s[OBJ[c][1]], s[OBJ[c][2]] = x, env.GROUND_Y
    for k, v in (kw or {}).items():
        s[k] = v
    return s


def random_states(rng, n):
    """Arbitrary vectors in the state box, not necessarily reachable."""
    s = np.empty((n, env.STATE_DIM))
    s[:, [0, 4, 7, 10]] = rng.uniform(-1, 1, (n, 4))
    s[:, [1, 5, 8, 11]] = rng.uniform(0, 1, (n, 4))
    s[:, 2] = rng.uniform(0, 1, n)
    s[:, [3, 6, 9]] = rng.integers(0, 2, (n, 3))
    return s


def check_invariants(s):
    held = [s[OBJ[c][0]] for c in env.COLORS]
    assert sum(h > 0.5 for h in held) <= 1
    assert all(h in (0.0, 1.0) for h in held)
    assert -1 <= s[env.GX] <= 1 and 0 <= s[env.GY] <= 1 and 0 <= s[env.AP] <= 1
    free = [c for c in env.COLORS if s[OBJ[c][0]] < 0.5]
    for c in free:
        _, ix, iy = OBJ[c]
        y = s[iy]
        supports = [s[OBJ[d][2]] + env.STACK_DY for d in env.COLORS
                    if d != c and abs(s[OBJ[d][1]] - s[ix]) < env.SUPPORT_DX]
        assert y == env.GROUND_Y or any(abs(y - v) < 1e-12 for v in supports)


# --- reset ------------------------------------------------------------------

def test_reset_is_deterministic():
    assert env.reset(7).tobytes() == env.reset(7).tobytes()


def test_reset_distribution():
    for seed in range(1000):
        s = env.reset(seed)
        xs = np.array([s[OBJ[c][1]] for c in env.COLORS])
        gaps = np.abs(xs[:, None] - xs[None, :])[np.triu_indices(3, 1)]
        assert gaps.min() >= env.MIN_OBJECT_SEPARATION
        assert np.all(np.abs(xs) <= 0.8)
        assert all(s[OBJ[c][0]] == 0 and s[OBJ[c][2]] == env.GROUND_Y for c in env.COLORS)
        assert -0.8 <= s[env.GX] <= 0.8 and 0.2 <= s[env.GY] <= 0.6 and s[env.AP] == 1.0


# --- step -------------------------------------------------------------------

def test_zero_action_is_a_fixed_point():
    s = placed()
    assert env.step(s, [0.0, 0.0, 0.0]).tobytes() == s.tobytes()


def test_motion_and_clamping():
    s = env.step(placed(), [1.0, -1.0, -1.0])
    assert s[env.GX] == pytest.approx(0.05) and s[env.GY] == pytest.approx(0.75)
    assert s[env.AP] == pytest.approx(0.8)
    s = env.step(placed(), [5.0, 0.0, 0.0])  # clamped to 1 on ingestion
    assert s[env.GX] == pytest.approx(0.05)
    edge = placed({env.GX: 0.99})
    assert env.step(edge, [1.0, 0.0, 0.0])[env.GX] == 1.0


def test_grasp_rule():
    s = placed({env.GX: -0.6, env.GY: env.GROUND_Y, env.AP: 0.2})
    assert env.step(s, [0, 0, 0])[OBJ["red"][0]] == 1.0


def test_grasp_needs_closed_fingers_and_proximity():
    s = placed({env.GX: -0.6, env.GY: env.GROUND_Y, env.AP: 0.5})
    assert env.step(s, [0, 0, 0])[OBJ["red"][0]] == 0.0
    s = placed({env.GX: -0.5, env.GY: env.GROUND_Y, env.AP: 0.2})
    assert env.step(s, [0, 0, 0])[OBJ["red"][0]] == 0.0


def test_nearest_object_is_grasped():
    s = placed({env.GX: 0.0, env.GY: env.GROUND_Y, env.AP: 0.2, 4: 0.04, 7: -0.03})
    s = env.step(s, [0, 0, 0])
    assert s[OBJ["red"][0]] == 0.0 and s[OBJ["green"][0]] == 1.0


def test_held_object_tracks_gripper():
    s = placed({env.GX: -0.6, env.GY: env.GROUND_Y, env.AP: 0.2})
    for _ in range(5):
        s = env.step(s, [0.3, 1.0, -1.0])
    assert s[OBJ["red"][1]] == s[env.GX] and s[OBJ["red"][2]] == s[env.GY]


def test_drop_onto_blue_settles_on_top():
    # scripted: grasp red, carry it over blue, open the fingers
    s = placed({env.GX: -0.6, env.GY: env.GROUND_Y, env.AP: 0.2})
    s = env.step(s, [0, 0, 0])
    for _ in range(6):
        s = env.step(s, [0, 1, -1])
    while s[env.GX] < 0.6 - 1e-9:
        s = env.step(s, [min(1.0, (0.6 - s[env.GX]) / env.MOVE_SCALE), 0, -1])
    assert s[OBJ["red"][0]] == 1.0 and abs(s[OBJ["red"][1]] - s[OBJ["blue"][1]]) < env.SUPPORT_DX
    while s[env.AP] <= env.RELEASE_APERTURE:
        s = env.step(s, [0, 0, 1])
    assert s[OBJ["red"][0]] == 0.0
    assert s[OBJ["red"][2]] == pytest.approx(s[OBJ["blue"][2]] + env.STACK_DY, abs=1e-15)
    assert env.reward("red_stack_blue", s) == 1.0


def test_drop_away_from_support_falls_to_ground():
    s = placed({env.GX: 0.3, env.GY: 0.7, env.AP: 0.8, 3: 1.0, 4: 0.3, 5: 0.7})
    s = env.step(s, [0, 0, 0])
    assert s[OBJ["red"][0]] == 0.0 and s[OBJ["red"][2]] == env.GROUND_Y


def test_step_rejects_bad_actions():
    with pytest.raises(env.EnvError):
        env.step(placed(), [np.nan, 0, 0])
    with pytest.raises(env.EnvError):
        env.step(placed(), [0, 0])


def test_step_is_deterministic_with_noise():
    s = env.reset(3)
    a = env.step(s, [0.2, 0.1, -0.3], np.random.default_rng(9), env.MOTION_NOISE)
    b = env.step(s, [0.2, 0.1, -0.3], np.random.default_rng(9), env.MOTION_NOISE)
    assert a.tobytes() == b.tobytes()


def test_state_serialisation_round_trip():
    s = env.step(env.reset(11), [0.3, -0.2, 0.1], np.random.default_rng(1), env.MOTION_NOISE)
    assert np.frombuffer(s.astype("<f8").tobytes(), "<f8").tobytes() == s.tobytes()


def test_random_rollouts_keep_invariants():
    rng = np.random.default_rng(0)
    for ep in range(40):
        s = env.reset(rng)
        for _ in range(100):
            s = env.step(s, rng.uniform(-1, 1, 3), rng, env.MOTION_NOISE)
            check_invariants(s)


# --- reward -----------------------------------------------------------------

def test_reward_examples():
    s = placed({env.GX: -0.6, env.GY: env.GROUND_Y})
    assert env.reward("reach_red", s) == 1.0
    assert env.reward("lift_red", s) == 0.0
    stacked = placed({4: 0.6, 5: env.GROUND_Y + env.STACK_DY})
    assert env.reward("red_stack_blue", stacked) == 1.0
    held_there = stacked.copy()
    held_there[3] = 1.0
    assert env.reward("red_stack_blue", held_there) == 0.5


def test_reward_formulas_against_direct_evaluation():
    rng = np.random.default_rng(5)
    for s in random_states(rng, 200):
        d = np.hypot(s[0] - s[4], s[1] - s[5])
        assert env.reward("reach_red", s) == pytest.approx(max(0.0, 1 - d / 0.5))
        assert env.reward("lift_green", s) == pytest.approx(min(max((s[8] - 0.05) / 0.35, 0), 1))
        d = np.hypot(s[4] - s[10], s[5] - (s[11] + 0.15))
        assert env.reward("red_hover_blue", s) == pytest.approx(max(0.0, 1 - d / 0.3))
        d = np.hypot(s[4] - 0.6, s[5] - 0.05)
        assert env.reward("bring_red", s) == pytest.approx(max(0.0, 1 - d / 0.5))


def test_reward_vectorises():
    rng = np.random.default_rng(6)
    batch = random_states(rng, 50).reshape(5, 10, 12)
    for task in env.TASK_NAMES:
        r = env.reward(task, batch)
        assert r.shape == (5, 10)
        np.testing.assert_array_equal(r[2, 3], env.reward(task, batch[2, 3]))


def test_unknown_task():
    with pytest.raises(env.EnvError):
        env.reward("fly_red", placed())


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_reward_in_unit_interval(seed):
    states = random_states(np.random.default_rng(seed), 2000)
    for task in env.TASK_NAMES:
        r = env.reward(task, states)
        assert np.all((r >= 0) & (r <= 1))


# --- base policies ----------------------------------------------------------

def test_base_policy_roster():
    assert len(env.BASE_POLICIES) == 9
    s = env.reset(0)
    np.testing.assert_array_equal(env.base_policy_action("open_fingers", s), [0, 0, 1])
    np.testing.assert_array_equal(env.base_policy_action("close_fingers", s), [0, 0, -1])
    np.testing.assert_array_equal(env.base_policy_action("move_pinch_y_dec", s), [0, -1, 0])
    with pytest.raises(env.EnvError):
        env.base_policy_action("dance", s)


def test_reach_far_left_saturates():
    s = placed({env.GX: -1.0})
    s[OBJ["red"][1]] = 0.5
    assert env.base_policy_action("reach_red", s)[0] == 1.0


def test_lift_red_succeeds_on_most_seeds():
    ok = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        s = env.reset(rng)
        for _ in range(400):
            s = env.step(s, env.base_policy_action("lift_red", s), rng, env.MOTION_NOISE)
        ok += s[OBJ["red"][0]] == 1.0 and s[OBJ["red"][2]] >= 0.3
    assert ok >= 90


def test_red_hover_blue_reaches_hover_pose():
    rewards = []
    for seed in range(20):
        s = env.reset(seed)
        for _ in range(400):
            s = env.step(s, env.base_policy_action("red_hover_blue", s))
        rewards.append(env.reward("red_hover_blue", s))
    assert np.mean(rewards) > 0.8


def test_no_base_policy_grasps_green_from_reset():
    for seed in range(30):
        for pol in env.BASE_POLICIES:
            s = env.reset(seed)
            for _ in range(200):
                s = env.step(s, env.base_policy_action(pol, s))
            # single policies from a fresh reset never pick up green
            assert s[OBJ["green"][0]] == 0.0
