import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfcql_lab.core import (
    EnvId,
    EnvSpec,
    RngStream,
    Tier,
    Transition,
    empirical_behavior,
    load_dataset,
    save_dataset,
    validate_dataset,
)
from cfcql_lab.envs import ToyMMDP

from conftest import make_dataset, random_toy_dataset

TOY_SPEC = ToyMMDP(2).spec()


def test_env_spec_rejects_bad_values():
    with pytest.raises(ValueError):
        EnvSpec(EnvId.TOY_MMDP, 0, 3, 0.9, 1.0, 20, "discrete", "x")
    with pytest.raises(ValueError):
        EnvSpec(EnvId.TOY_MMDP, 2, 1, 0.9, 1.0, 20, "discrete", "x")
    with pytest.raises(ValueError):
        EnvSpec(EnvId.TOY_MMDP, 2, 3, 1.0, 1.0, 20, "discrete", "x")


def test_rng_stream_determinism():
    a = RngStream(7, "rollout").generator().random(8)
    b = RngStream(7, "rollout").generator().random(8)
    c = RngStream(7, "train").generator().random(8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    child1 = RngStream(7).child("x").generator().random(4)
    child2 = RngStream(7).child("x").generator().random(4)
    assert np.array_equal(child1, child2)


def _transition(s, actions, r, s2, done=False):
    return Transition(s, tuple(actions), r, s2, done)


def test_validate_dataset_accepts_well_formed(rng):
    d = random_toy_dataset(rng, n_transitions=10, episodes=2)
    assert validate_dataset(d, TOY_SPEC).ok


def test_validate_dataset_flags_action_out_of_range():
    ts = [_transition(0, (0, 3), 0.5, 1, True)]  # 3 == n_actions
    d = make_dataset(ts, TOY_SPEC)
    report = validate_dataset(d, TOY_SPEC)
    assert not report.ok
    assert any("transition 0" in v and "action 3" in v for v in report.violations)


def test_validate_dataset_flags_overlapping_boundaries():
    ts = [_transition(0, (0, 0), 0.5, 1, False) for _ in range(4)]
    d = make_dataset(ts, TOY_SPEC, boundaries=(0, 2, 2))
    report = validate_dataset(d, TOY_SPEC)
    assert any("overlap" in v for v in report.violations)


def test_validate_dataset_flags_reward_above_rmax():
    ts = [_transition(0, (0, 0), 1.5, 1, True)]
    report = validate_dataset(make_dataset(ts, TOY_SPEC), TOY_SPEC)
    assert any("r_max" in v for v in report.violations)


def test_empirical_behavior_counting():
    ts = [
        _transition(0, (1, 0), 0.0, 0),
        _transition(0, (1, 1), 0.0, 0),
        _transition(0, (1, 2), 0.0, 0),
        _transition(0, (0, 0), 0.0, 0, True),
    ]
    beta = empirical_behavior(make_dataset(ts, TOY_SPEC), smoothing=0.0)
    assert beta.probs(0)[0, 1] == pytest.approx(0.75)


def test_empirical_behavior_laplace_smoothing():
    ts = [_transition(0, (1, 0), 0.0, 0) for _ in range(4)]
    beta = empirical_behavior(make_dataset(ts, TOY_SPEC), smoothing=1.0)
    np.testing.assert_allclose(beta.probs(0)[0], [1 / 7, 5 / 7, 1 / 7])


def test_empirical_behavior_empty_dataset():
    with pytest.raises(ValueError, match="empty dataset"):
        empirical_behavior(make_dataset([], TOY_SPEC, boundaries=()))


def test_empirical_behavior_matches_bruteforce_count(rng):
    d = random_toy_dataset(rng, n_agents=3, n_transitions=1000, episodes=10)
    spec = d.header.spec
    beta = empirical_behavior(d, smoothing=0.5)
    # independent counting pass
    counts = {}
    for t in d.transitions:
        row = counts.setdefault(t.state, np.zeros((spec.n_agents, spec.n_actions)))
        for i, a in enumerate(t.joint_action):
            row[i, a] += 1
    for s, row in counts.items():
        expect = (row + 0.5) / (row.sum(axis=1, keepdims=True) + 0.5 * spec.n_actions)
        np.testing.assert_allclose(beta.probs(s), expect, atol=1e-12)


def test_empirical_behavior_unseen_state_is_uniform(rng):
    d = random_toy_dataset(rng, n_transitions=20, episodes=2)
    beta = empirical_behavior(d)
    np.testing.assert_allclose(beta.probs(10**6), 1.0 / 3.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 5.0))
def test_empirical_behavior_is_simplex(seed, smoothing):
    d = random_toy_dataset(np.random.default_rng(seed), n_transitions=60, episodes=3)
    beta = empirical_behavior(d, smoothing=smoothing)
    assert not beta.validate(atol=1e-9)


def test_dataset_roundtrip_discrete(tmp_path, rng):
    d = random_toy_dataset(rng, n_transitions=50, episodes=5)
    path = tmp_path / "toy.dat"
    save_dataset(d, path)
    loaded = load_dataset(path)
    assert loaded.header == d.header
    assert loaded.trajectory_boundaries == d.trajectory_boundaries
    assert loaded.transitions == d.transitions


@settings(max_examples=25, deadline=None)
@given(
    st.lists(
        st.tuples(
            st.floats(-1.0, 1.0),
            st.floats(0, 9.99),
            st.integers(0, 2),
            st.integers(0, 2),
        ),
        min_size=1,
        max_size=20,
    )
)
def test_dataset_roundtrip_vector_states(tmp_path_factory, rows):
    spec = EnvSpec(EnvId.EQUAL_LINE, 2, 11, 0.99, 2.0, 50, "vector", "positions")
    ts = [
        Transition((x, x + 1.0), (a0, a1), r, (x + 0.5, x), False)
        for (r, x, a0, a1) in rows
    ]
    d = make_dataset(ts, spec, tier=Tier.RANDOM)
    path = tmp_path_factory.mktemp("ds") / "line.dat"
    save_dataset(d, path)
    loaded = load_dataset(path)
    assert loaded.transitions == d.transitions
    assert loaded.header.spec == spec
