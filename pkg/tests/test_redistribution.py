from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marlcredit.redistribution import (
    PotentialSeries,
    RedistributedRewards,
    ScoreMatrix,
    aggregate_scores,
    agent_weights,
    compute_weights,
    delta_k,
    potential_series,
    redistribute,
    temporal_only_redistribution,
    temporal_weights,
    uniform_redistribution,
    verify_telescoping,
)


def full_active(scores) -> ScoreMatrix:
    scores = np.asarray(scores, dtype=float)
    return ScoreMatrix(scores=scores, active=np.ones(scores.shape, dtype=bool))


# ---------------------------------------------------------------------------
# aggregate_scores


def test_aggregate_sums_active_agents():
    assert np.array_equal(aggregate_scores(full_active([[1, 1], [2, 4]])), [2, 6])


def test_aggregate_single_entry():
    assert np.array_equal(aggregate_scores(full_active([[5]])), [5])


def test_aggregate_excludes_masked_entries():
    m = ScoreMatrix(scores=[[3, 9]], active=[[True, False]])
    assert np.array_equal(aggregate_scores(m), [3])


def test_nonfinite_scores_rejected_with_index():
    scores = np.ones((3, 2))
    scores[2, 1] = np.nan
    with pytest.raises(ValueError, match=r"t=2.*agent=1"):
        ScoreMatrix(scores=scores, active=np.ones((3, 2), dtype=bool))


def test_all_inactive_rejected():
    with pytest.raises(ValueError, match="no active"):
        ScoreMatrix(scores=[[1.0]], active=[[False]])


# ---------------------------------------------------------------------------
# temporal_weights
# Hand evaluation: shift by the min, normalize, rescale to unit sum.


def test_temporal_weights_basic():
    # min=2, shifted=[0,4] -> [0, 1]
    np.testing.assert_allclose(temporal_weights(np.array([2.0, 6.0])), [0.0, 1.0], atol=1e-15)


def test_temporal_weights_degenerate_uniform():
    np.testing.assert_array_equal(temporal_weights(np.array([2.0, 2.0])), [0.5, 0.5])


def test_temporal_weights_three_steps():
    # min=0, shifted sum=4 -> [0, 0.25, 0.75]
    np.testing.assert_allclose(
        temporal_weights(np.array([0.0, 1.0, 3.0])), [0.0, 0.25, 0.75], atol=1e-15
    )


def test_temporal_weights_empty_rejected():
    with pytest.raises(ValueError):
        temporal_weights(np.array([]))


def test_temporal_weights_single_step_is_one():
    np.testing.assert_array_equal(temporal_weights(np.array([7.0])), [1.0])


# ---------------------------------------------------------------------------
# agent_weights


def test_agent_weights_basic_row():
    np.testing.assert_allclose(agent_weights(full_active([[2.0, 4.0]]))[0], [0.0, 1.0], atol=1e-15)


def test_agent_weights_degenerate_row_uniform():
    np.testing.assert_array_equal(agent_weights(full_active([[1.0, 1.0]]))[0], [0.5, 0.5])


def test_agent_weights_respect_mask():
    # normalize over agents {0, 1} only: min=0, shifted=[0, 2] -> [0, 1, 0]
    m = ScoreMatrix(scores=[[0.0, 2.0, 7.0]], active=[[True, True, False]])
    np.testing.assert_allclose(agent_weights(m)[0], [0.0, 1.0, 0.0], atol=1e-15)


def test_agent_weights_empty_timestep_flagged():
    m = ScoreMatrix(scores=[[1.0], [2.0]], active=[[False], [True]])
    w = compute_weights(m)
    assert np.array_equal(w.empty_timesteps, [True, False])
    assert np.array_equal(w.agent[0], [0.0])


# ---------------------------------------------------------------------------
# redistribute


def test_redistribute_example_a():
    r = redistribute(full_active([[1.0, 1.0], [2.0, 4.0]]), team_reward=10.0)
    np.testing.assert_allclose(r.rewards, [[0.0, 0.0], [0.0, 10.0]], atol=1e-12)
    assert r.rewards.sum() == pytest.approx(10.0, abs=1e-9)


def test_redistribute_double_degenerate_uniform():
    r = redistribute(full_active([[3.0, 3.0], [3.0, 3.0]]), team_reward=8.0)
    np.testing.assert_allclose(r.rewards, np.full((2, 2), 2.0), atol=1e-12)


def test_redistribute_mixed_degeneracy():
    # c_agg=[2,2] -> uniform temporal; row0 [0,2] -> [0,1]; row1 [1,1] -> uniform
    r = redistribute(full_active([[0.0, 2.0], [1.0, 1.0]]), team_reward=4.0)
    np.testing.assert_allclose(r.rewards, [[0.0, 2.0], [1.0, 1.0]], atol=1e-12)


def test_redistribute_negative_reward_keeps_sign():
    r = redistribute(full_active([[0.0, 2.0], [1.0, 1.0]]), team_reward=-4.0)
    assert (r.rewards <= 0).all()
    assert r.rewards.sum() == pytest.approx(-4.0, abs=1e-9)


def test_redistribute_zero_mass_falls_back_to_uniform():
    # Temporal weight concentrates on the empty timestep (c_agg = [-1, 0]),
    # so the product mass over active cells is zero.
    m = ScoreMatrix(scores=[[-1.0, 0.0], [0.0, 0.0]], active=[[True, True], [False, False]])
    r = redistribute(m, team_reward=6.0)
    np.testing.assert_allclose(r.rewards, [[3.0, 3.0], [0.0, 0.0]], atol=1e-9)


def test_redistribute_empty_timestep_rescales_to_full_reward():
    m = ScoreMatrix(
        scores=[[1.0, 2.0], [0.0, 0.0], [5.0, 1.0]],
        active=[[True, True], [False, False], [True, True]],
    )
    r = redistribute(m, team_reward=3.0)
    assert r.rewards.sum() == pytest.approx(3.0, abs=1e-9)
    assert np.array_equal(r.rewards[1], [0.0, 0.0])


# ---------------------------------------------------------------------------
# delta_k


def test_delta_example_a():
    w = compute_weights(full_active([[1.0, 1.0], [2.0, 4.0]]))
    np.testing.assert_allclose(delta_k(w), [0.0, 1.0], atol=1e-12)


def test_delta_uniform_symmetry():
    r = uniform_redistribution(2, 2, np.ones((2, 2), dtype=bool), team_reward=1.0)
    np.testing.assert_allclose(delta_k(r.weights), [0.5, 0.5], atol=1e-12)


def test_delta_mixed_case():
    w = compute_weights(full_active([[0.0, 2.0], [1.0, 1.0]]))
    np.testing.assert_allclose(delta_k(w), [0.25, 0.75], atol=1e-12)


# ---------------------------------------------------------------------------
# potentials and telescoping


def _rewards_fixture(rewards, team_reward) -> RedistributedRewards:
    rewards = np.asarray(rewards, dtype=float)
    m = full_active(np.ones_like(rewards))
    base = uniform_redistribution(*rewards.shape, m.active, team_reward=0.0)
    return RedistributedRewards(
        rewards=rewards, team_reward=team_reward, weights=base.weights, active=m.active
    )


def test_potential_prefix_sums_single_agent():
    r = _rewards_fixture([[1.0], [2.0], [3.0]], team_reward=6.0)
    np.testing.assert_array_equal(potential_series(r).potentials[:, 0], [0.0, 1.0, 3.0, 6.0])


def test_potential_all_zero():
    r = _rewards_fixture(np.zeros((4, 2)), team_reward=0.0)
    assert not potential_series(r).potentials.any()


def test_potential_example_a_column():
    r = redistribute(full_active([[1.0, 1.0], [2.0, 4.0]]), team_reward=10.0)
    np.testing.assert_allclose(potential_series(r).potentials[:, 1], [0.0, 0.0, 10.0], atol=1e-12)


def test_telescoping_holds_by_construction():
    r = redistribute(full_active([[0.0, 2.0], [1.0, 1.0]]), team_reward=4.0)
    ok, residual = verify_telescoping(potential_series(r), r)
    assert ok and residual == 0.0


def test_telescoping_detects_perturbed_potential():
    r = _rewards_fixture([[1.0], [2.0]], team_reward=3.0)
    p = potential_series(r)
    perturbed = p.potentials.copy()
    perturbed[1, 0] += 1.0
    ok, residual = verify_telescoping(PotentialSeries(potentials=perturbed), r)
    assert not ok and residual == pytest.approx(1.0)


def test_telescoping_detects_rescaled_rewards():
    r = _rewards_fixture([[1.0], [2.0]], team_reward=3.0)
    p = potential_series(r)
    doubled = _rewards_fixture([[2.0], [4.0]], team_reward=6.0)
    ok, residual = verify_telescoping(p, doubled)
    # residual equals the reward magnitude at the worst cell
    assert not ok and residual == pytest.approx(2.0)


def test_telescoping_shape_mismatch_rejected():
    r = _rewards_fixture([[1.0], [2.0]], team_reward=3.0)
    with pytest.raises(ValueError):
        verify_telescoping(PotentialSeries(potentials=np.zeros((4, 1))), r)


# ---------------------------------------------------------------------------
# uniform / temporal-only baselines


def test_uniform_even_split():
    r = uniform_redistribution(2, 2, np.ones((2, 2), dtype=bool), team_reward=8.0)
    np.testing.assert_allclose(r.rewards, np.full((2, 2), 2.0), atol=1e-12)


def test_uniform_respects_mask():
    active = np.array([[True, True], [True, False]])
    r = uniform_redistribution(2, 2, active, team_reward=6.0)
    np.testing.assert_allclose(r.rewards, [[2.0, 2.0], [2.0, 0.0]], atol=1e-12)


def test_uniform_zero_reward():
    r = uniform_redistribution(2, 2, np.ones((2, 2), dtype=bool), team_reward=0.0)
    assert not r.rewards.any()


def test_uniform_no_active_rejected():
    with pytest.raises(ValueError):
        uniform_redistribution(1, 1, np.zeros((1, 1), dtype=bool), team_reward=1.0)


def test_temporal_only_example():
    r = temporal_only_redistribution(full_active([[1.0, 1.0], [2.0, 4.0]]), team_reward=10.0)
    np.testing.assert_allclose(r.rewards, [[0.0, 0.0], [5.0, 5.0]], atol=1e-12)


def test_temporal_only_degenerate_uniform():
    r = temporal_only_redistribution(full_active([[1.0, 1.0], [1.0, 1.0]]), team_reward=8.0)
    np.testing.assert_allclose(r.rewards, np.full((2, 2), 2.0), atol=1e-12)


def test_temporal_only_single_agent_collapse():
    m = full_active([[2.0], [6.0]])
    r = temporal_only_redistribution(m, team_reward=10.0)
    w = temporal_weights(aggregate_scores(m))
    np.testing.assert_allclose(r.rewards[:, 0], w * 10.0, atol=1e-12)


# ---------------------------------------------------------------------------
# fuzzed invariants


def _random_score_matrix(rng: np.random.Generator) -> tuple[ScoreMatrix, float]:
    T = int(rng.integers(1, 17))
    N = int(rng.integers(1, 6))
    scores = rng.uniform(-10, 10, size=(T, N))
    if rng.random() < 0.25:  # flatten some rows to force degeneracy
        rows = rng.integers(0, T, size=max(1, T // 3))
        scores[rows] = scores[rows, :1]
    active = rng.random((T, N)) > 0.1
    if not active.any():
        active[rng.integers(0, T), rng.integers(0, N)] = True
    return ScoreMatrix(scores=scores, active=active), float(rng.uniform(-10, 10))


score_matrices = st.integers(min_value=0, max_value=2**32 - 1).map(
    lambda seed: _random_score_matrix(np.random.default_rng(seed))
)


@settings(max_examples=200, deadline=None)
@given(score_matrices)
def test_fuzz_return_equivalence_and_ranges(case):
    m, team_reward = case
    r = redistribute(m, team_reward)
    assert abs(r.rewards.sum() - team_reward) <= 1e-9 * max(1.0, abs(team_reward))
    w = r.weights
    assert ((w.temporal >= 0) & (w.temporal <= 1)).all()
    assert ((w.agent >= 0) & (w.agent <= 1)).all()
    assert abs(w.temporal.sum() - 1.0) <= 1e-12
    row_sums = w.agent.sum(axis=1)
    assert np.abs(row_sums[~w.empty_timesteps] - 1.0).max(initial=0.0) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(score_matrices)
def test_fuzz_delta_bounds(case):
    m, _ = case
    d = delta_k(compute_weights(m))
    assert ((d >= -1e-15) & (d <= 1.0 + 1e-12)).all()
    if m.active.any(axis=1).all():
        assert abs(d.sum() - 1.0) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(score_matrices, st.floats(min_value=0.01, max_value=100), st.floats(-50, 50))
def test_fuzz_weight_scale_shift_invariance(case, scale, shift):
    m, _ = case
    w0 = compute_weights(m)
    scaled = ScoreMatrix(scores=m.scores * scale, active=m.active)
    w1 = compute_weights(scaled)
    np.testing.assert_allclose(w1.temporal, w0.temporal, atol=1e-9)
    np.testing.assert_allclose(w1.agent, w0.agent, atol=1e-9)
    # shifting every score by a constant leaves all weights unchanged
    shifted = ScoreMatrix(scores=m.scores + shift, active=m.active)
    w2 = compute_weights(shifted)
    np.testing.assert_allclose(w2.agent, w0.agent, atol=1e-9)
    # shifting aggregated scores leaves temporal weights unchanged
    agg = aggregate_scores(m)
    np.testing.assert_allclose(
        temporal_weights(agg + shift), temporal_weights(agg), atol=1e-9
    )


@settings(max_examples=100, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_fuzz_telescoping_exact_on_dyadic_rewards(seed):
    # Rewards on a dyadic grid make every prefix sum exactly representable,
    # so the telescoping identity holds with residual exactly 0.
    rng = np.random.default_rng(seed)
    T, N = int(rng.integers(1, 33)), int(rng.integers(1, 6))
    sign = rng.choice([-1.0, 1.0])
    rewards = sign * rng.integers(0, 2**20, size=(T, N)).astype(float) / 2**16
    r = _rewards_fixture(rewards, team_reward=float(rewards.sum()))
    ok, residual = verify_telescoping(potential_series(r), r)
    assert ok and residual == 0.0


@settings(max_examples=100, deadline=None)
@given(score_matrices)
def test_fuzz_objective_doubling(case):
    # Terminal-only team reward plus the shaped stream doubles the return.
    m, team_reward = case
    r = redistribute(m, team_reward)
    combined = r.rewards.sum() + team_reward
    assert abs(combined - 2.0 * team_reward) <= 1e-9 * max(1.0, abs(team_reward))
