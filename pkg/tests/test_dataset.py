import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jumpyplan import dataset as D
from jumpyplan import env


@pytest.fixture(scope="module")
def small():
    return D.generate_dataset(12, seed=3)


# --- episodes ---------------------------------------------------------------

def test_episode_shape_and_determinism():
    a = D.generate_episode(17)
    b = D.generate_episode(17)
    assert a.states.shape == (401, 12) and a.actions.shape == (400, 3)
    assert a.states.tobytes() == b.states.tobytes() and a.actions.tobytes() == b.actions.tobytes()


def test_recorded_policies_generated_the_actions():
    for seed in range(10):
        tr = D.generate_episode(seed)
        for t in range(400):
            pid = tr.policy_ids[0] if t < D.SWITCH_STEP else tr.policy_ids[1]
            np.testing.assert_array_equal(tr.actions[t], env.base_policy_action(pid, tr.states[t]))


def test_policy_draws_cover_the_roster():
    seen = {p for s in range(200) for p in D.generate_episode(s, T=2).policy_ids}
    assert seen == set(range(len(env.BASE_POLICIES)))


def test_stored_episodes_replay_bitwise(small):
    for i in range(small.episode_count):
        tr = D.replay_episode(small.episode(i))
        assert tr.states.astype(np.float32).tobytes() == small.states[i].tobytes()
        assert tr.actions.astype(np.float32).tobytes() == small.actions[i].tobytes()
        assert tr.policy_ids == tuple(int(p) for p in small.policy_ids[i])


# --- dataset and file format ------------------------------------------------

def test_zero_episodes_rejected():
    with pytest.raises(D.DatasetError):
        D.generate_dataset(0, seed=1)


def test_transition_count_arithmetic():
    ds = D.generate_dataset(2, seed=0)
    assert ds.transition_count == 2 * 400
    # the default corpus: 500 episodes of 400 steps
    assert 500 * ds.T == 200000


def test_file_round_trip_is_byte_identical(small, tmp_path):
    p1, p2 = tmp_path / "a.jmpd", tmp_path / "b.jmpd"
    h1 = D.write_dataset(small, p1)
    again = D.read_dataset(p1)
    h2 = D.write_dataset(again, p2)
    assert h1 == h2 == D.content_hash(p1)
    assert p1.read_bytes() == p2.read_bytes()
    assert D.read_header(p1) == {"episode_count": 12, "T": 400, "state_dim": 12, "action_dim": 3,
                                 "master_seed": 3, "noise": True}


def test_file_layout_matches_declared_sizes(small, tmp_path):
    p = tmp_path / "d.jmpd"
    D.write_dataset(small, p)
    header = len(D.MAGIC) + 4 * 4 + 8 + 1
    per_episode = 8 + 1 + 1 + 401 * 12 * 4 + 400 * 3 * 4
    assert p.stat().st_size == header + 12 * per_episode + 32
    assert p.read_bytes()[:5] == b"JMPD1"


def test_same_seed_same_file_hash(tmp_path):
    h1 = D.write_dataset(D.generate_dataset(3, seed=9), tmp_path / "a")
    h2 = D.write_dataset(D.generate_dataset(3, seed=9), tmp_path / "b")
    h3 = D.write_dataset(D.generate_dataset(3, seed=10), tmp_path / "c")
    assert h1 == h2 != h3


def test_corrupted_file_is_rejected(small, tmp_path):
    p = tmp_path / "d.jmpd"
    D.write_dataset(small, p)
    raw = bytearray(p.read_bytes())
    raw[1000] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(D.DatasetError, match="hash"):
        D.read_dataset(p)
    p.write_bytes(b"NOPE" + bytes(raw[4:]))
    with pytest.raises(D.DatasetError):
        D.read_dataset(p)


def test_missing_output_directory(small, tmp_path):
    with pytest.raises(D.DatasetError):
        D.write_dataset(small, tmp_path / "nope" / "d.jmpd")


def test_split_holds_out_last_episodes(small):
    train, held = small.split(0.25)
    assert train.episode_count == 9 and held.episode_count == 3
    assert held.seeds.tolist() == small.seeds[9:].tolist()


# --- sampling ---------------------------------------------------------------

def test_snippet_shapes_and_contiguity(small):
    rng = np.random.default_rng(0)
    for _ in range(50):
        sn = D.sample_snippet(small, rng, 10)
        assert sn.states.shape == (11, 12) and sn.actions.shape == (10, 3)
        hits = [(e, t) for e in range(small.episode_count) for t in range(391)
                if np.array_equal(small.states[e, t], sn.states[0])
                and np.array_equal(small.states[e, t + 10], sn.states[-1])]
        assert hits
        e, t = hits[0]
        np.testing.assert_array_equal(small.actions[e, t:t + 10], sn.actions)


def test_full_length_window_starts_at_zero(small):
    ep, t0 = D.sample_starts(small, np.random.default_rng(1), 400, 100)
    assert np.all(t0 == 0)


def test_window_longer_than_episode_rejected(small):
    with pytest.raises(D.DatasetError):
        D.sample_snippet(small, np.random.default_rng(0), 401)
    with pytest.raises(D.DatasetError):
        D.sample_snippet(small, np.random.default_rng(0), 0)


def test_start_index_histogram_is_uniform(small):
    ep, t0 = D.sample_starts(small, np.random.default_rng(2), 10, 100_000)
    counts = np.bincount(t0, minlength=391)
    p = 1 / 391
    sigma = np.sqrt(100_000 * p * (1 - p))
    assert np.all(np.abs(counts - 100_000 * p) <= 4.5 * sigma)
    chi2 = np.sum((counts - 100_000 * p) ** 2 / (100_000 * p))
    # chi-square with 390 dof: mean 390, sd ~27.9
    assert chi2 < 390 + 5 * np.sqrt(2 * 390)
    assert t0.max() == 390 and np.bincount(ep).min() > 0


def test_batch_matches_gather(small):
    rng1, rng2 = np.random.default_rng(4), np.random.default_rng(4)
    s, a = D.sample_batch(small, rng1, 5, 7)
    ep, t0 = D.sample_starts(small, rng2, 5, 7)
    for i in range(7):
        np.testing.assert_array_equal(s[i], small.states[ep[i], t0[i]:t0[i] + 6])
        np.testing.assert_array_equal(a[i], small.actions[ep[i], t0[i]:t0[i] + 5])


# --- delta statistics -------------------------------------------------------

def test_constant_dimension_gets_the_floor():
    deltas = np.zeros((1000, 12))
    assert np.all(D.delta_scale_from_deltas(deltas).scale == D.DELTA_FLOOR)


def test_uniform_deltas_scale():
    rng = np.random.default_rng(0)
    deltas = rng.uniform(-0.5, 0.5, (200_000, 12))
    scale = D.delta_scale_from_deltas(deltas).scale
    np.testing.assert_allclose(scale, 0.4975, atol=2e-3)
    # brute-force percentile oracle: sort and index
    srt = np.sort(np.abs(deltas[:, 0]))
    pos = 0.995 * (len(srt) - 1)
    lo = int(np.floor(pos))
    oracle = srt[lo] + (pos - lo) * (srt[lo + 1] - srt[lo])
    assert scale[0] == pytest.approx(oracle, rel=1e-12)


def test_scale_covers_fresh_deltas(small):
    scale = D.compute_delta_stats(small, 10, np.random.default_rng(0), samples=20_000).scale
    ep, t0 = D.sample_starts(small, np.random.default_rng(99), 10, 20_000)
    d = small.states[ep, t0 + 10].astype(float) - small.states[ep, t0].astype(float)
    inside = np.mean(np.abs(d / scale) <= 1, axis=0)
    assert np.all(inside >= 0.99)


def test_empty_dataset_rejected(small):
    empty = D.Dataset(small.states[:0], small.actions[:0], small.policy_ids[:0], small.seeds[:0], 0, True)
    with pytest.raises(D.DatasetError):
        D.compute_delta_stats(empty, 10)


def test_normalisation_examples():
    scale = np.full(12, 0.2)
    np.testing.assert_array_equal(D.normalize_delta(np.zeros(12), scale), 0)
    np.testing.assert_array_equal(D.normalize_delta(scale, scale), 1)
    np.testing.assert_array_equal(D.normalize_delta(2 * scale, scale), 1)
    np.testing.assert_allclose(D.denormalize_delta(np.full(12, 2.0), scale), 0.4)  # no clamp
    with pytest.raises(D.DatasetError):
        D.normalize_delta(np.zeros(12), np.zeros(12))
    with pytest.raises(D.DatasetError):
        D.DeltaScale(np.r_[np.ones(11), -1.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=12, max_size=12),
       st.lists(st.floats(1e-3, 5), min_size=12, max_size=12))
def test_normalise_round_trip_inside_range(delta, scale):
    delta, scale = np.array(delta), np.array(scale)
    delta = np.clip(delta, -scale, scale)
    back = D.denormalize_delta(D.normalize_delta(delta, scale), scale)
    np.testing.assert_allclose(back, delta, rtol=0, atol=1e-12)
