import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qdmeta.control import (
    GENERATIONS,
    MUTATION_RATE,
    RANGES,
    AnnealControl,
    EndogenousControl,
    Observation,
    RlControl,
    RlControllerState,
    StaticControl,
    anneal,
    bin_centre,
    consume_generations,
    endogenous_decode,
    endogenous_encode,
    make_controller,
    rl_step,
    rl_tree_refine,
    static_value,
)
from qdmeta.featuremaps import ConfigurationError


def test_static_values():
    assert static_value(GENERATIONS, 5).value == 5
    assert static_value(MUTATION_RATE, 0.125).value == 0.125
    with pytest.raises(ConfigurationError):
        static_value(MUTATION_RATE, 2.0)
    ctl = StaticControl(MUTATION_RATE, 0.25)
    assert [ctl.current(e) for e in (0, 10**6)] == [0.25, 0.25]


def test_anneal_endpoints_and_midpoint():
    M = 200_000
    assert anneal(GENERATIONS, 0, M) == 50.0
    assert anneal(GENERATIONS, M, M) == 1.0
    assert anneal(MUTATION_RATE, 0, M) == 1.0
    assert anneal(MUTATION_RATE, M, M) == 0.001
    assert anneal(MUTATION_RATE, M / 2, M) == pytest.approx(0.5005, abs=1e-15)
    assert anneal(MUTATION_RATE, 2 * M, M) == 0.001


def test_endogenous_examples():
    assert endogenous_decode([0.3, 0.0], GENERATIONS, (0, 1))[0] == 1.0
    assert endogenous_decode([0.3, 1.0], MUTATION_RATE, (0, 1))[0] == 1.0
    v, rest = endogenous_decode([0.3, 0.7, 0.5], GENERATIONS, (0, 1))
    assert v == 25.5 and consume_generations(v) == 26
    np.testing.assert_array_equal(rest, [0.3, 0.7])
    # non-linear box maps -1 to the floor
    assert endogenous_decode([0.0, -1.0], MUTATION_RATE, (-1, 1))[0] == 0.001
    with pytest.raises(ConfigurationError):
        endogenous_decode([0.5], GENERATIONS, (0, 1))


def test_consume_generations_rounds_half_up():
    assert [consume_generations(x) for x in (1.0, 1.49, 1.5, 2.5, 0.2)] == [1, 1, 2, 3, 1]


def test_bin_centres():
    assert bin_centre(MUTATION_RATE, 4) == pytest.approx(0.9001)
    assert bin_centre(GENERATIONS, 0) == pytest.approx(1 + 49 * 0.1)


def test_fresh_controller_is_greedy_lowest_index(rng):
    s = RlControllerState(MUTATION_RATE, epsilon=0.0)
    action, value = rl_step(s, Observation(), None, rng)
    assert action == 0 and value == bin_centre(MUTATION_RATE, 0)
    s.root.q[:] = [1.0, 0, 0, 0, 0]
    assert all(rl_step(s, Observation(), 0.0, rng)[0] == 0 for _ in range(50))


def test_sarsa_update_rule(rng):
    s = RlControllerState(MUTATION_RATE, epsilon=0.0, alpha=0.5, gamma=0.8, split_threshold=10**9)
    rl_step(s, Observation(), None, rng)  # action 0
    rl_step(s, Observation(), 2.0, rng)
    # Q(s,0) <- 0 + 0.5 * (2 + 0.8 * Q(s',a') - 0) with Q(s',a') read before the update
    assert s.root.q[0] == 1.0


def test_zero_reward_is_fixed_point(rng):
    s = RlControllerState(GENERATIONS)
    rl_step(s, Observation(), None, rng)
    for i in range(200):
        rl_step(s, Observation(max_mf=rng.random(), stagnation=i % 7), 0.0, rng)
    for leaf in s.leaves():
        np.testing.assert_array_equal(leaf.q, 0.0)


def _buffered_state(returns_for):
    s = RlControllerState(MUTATION_RATE)
    for i in range(40):
        stag = i % 8
        obs = np.array([0.0, 0.0, 0.0, 0.0, stag, 0.0])
        s.root.buffer.append((obs, returns_for(stag)))
    return s


def test_tree_split_on_stagnation():
    s = _buffered_state(lambda stag: 1.0 if stag > 3 else 0.0)
    s.root.q[:] = [0.1, 0.2, 0.3, 0.4, 0.5]
    assert rl_tree_refine(s)
    assert s.root.dim == 4 and 3 <= s.root.threshold < 4
    for child in (s.root.left, s.root.right):
        np.testing.assert_array_equal(child.q, [0.1, 0.2, 0.3, 0.4, 0.5])
        assert len(child.buffer) > 0


def test_no_split_for_identical_returns_or_small_buffer():
    assert not rl_tree_refine(_buffered_state(lambda stag: 0.5))
    s = RlControllerState(MUTATION_RATE)
    for i in range(5):
        s.root.buffer.append((np.full(6, float(i)), float(i > 2)))
    assert not rl_tree_refine(s)


def test_make_controller():
    assert isinstance(make_controller("static", 1000), StaticControl)
    c = make_controller("static-gen:10", 1000)
    assert (c.which, c.value) == (GENERATIONS, 10.0)
    assert isinstance(make_controller("anneal-mr", 1000), AnnealControl)
    assert isinstance(make_controller("endo-gen", 1000), EndogenousControl)
    assert isinstance(make_controller("rl-mr", 1000), RlControl)
    for bad in ("bogus", "static-mr", "static-mr:x", "anneal-mr:0.2", "rl-xx", "static-mr:3"):
        with pytest.raises(ConfigurationError):
            make_controller(bad, 1000)


def test_endogenous_control_strips_gene():
    c = EndogenousControl(MUTATION_RATE)
    W = np.array([[0.1, 0.2, 0.0], [0.1, 0.2, 1.0]])
    vals, stripped = c.values(W, 0, (0.0, 1.0))
    assert vals == [0.001, 1.0]
    assert stripped.shape == (2, 2)


@pytest.mark.invariant
@settings(max_examples=200, deadline=None)
@given(st.sampled_from([GENERATIONS, MUTATION_RATE]), st.floats(0, 1), st.floats(0, 1), st.floats(-5, 5))
def test_values_always_in_range(which, e1, e2, gene):
    lo, hi = RANGES[which]
    M = 1000.0
    a1, a2 = anneal(which, e1 * M, M), anneal(which, e2 * M, M)
    assert lo <= a1 <= hi
    if e1 <= e2:
        assert a1 >= a2
    v, _ = endogenous_decode([0.0, gene], which, (-1.0, 1.0))
    assert lo <= v <= hi


@pytest.mark.invariant
@settings(max_examples=100, deadline=None)
@given(st.sampled_from([GENERATIONS, MUTATION_RATE]), st.floats(0, 1), st.sampled_from([(0.0, 1.0), (-1.0, 1.0)]))
def test_endogenous_round_trip(which, u, box):
    lo, hi = RANGES[which]
    value = lo + u * (hi - lo)
    gene = endogenous_encode(value, which, box)
    assert endogenous_decode([0.0, gene], which, box)[0] == pytest.approx(value, abs=1e-12 * hi)


@pytest.mark.invariant
@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([GENERATIONS, MUTATION_RATE]))
def test_rl_controller_values_and_tree_growth(seed, which):
    rng = np.random.default_rng(seed)
    ctl = RlControl(which)
    ctl.start(rng)
    lo, hi = RANGES[which]
    n_leaves = 1
    for i in range(150):
        obs = Observation(
            max_mf=rng.random() * 100,
            mean_mf=rng.random() * 50,
            std_mf=rng.random(),
            diversity=rng.random(),
            stagnation=int(rng.integers(0, 10)),
            last_reward=rng.normal(),
        )
        info = ctl.update(obs, float(obs.stagnation > 4) - rng.random() * 0.1, rng)
        assert lo <= info["value"] <= hi
        leaves = ctl.state.leaves()
        assert len(leaves) >= n_leaves
        n_leaves = len(leaves)
        assert all(np.all(np.isfinite(leaf.q)) for leaf in leaves)
