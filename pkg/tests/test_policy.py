from __future__ import annotations

import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from raocraft.policy import (
    FEATURE_DIM,
    ActionCandidate,
    JobBook,
    NodeState,
    PolicyError,
    RecursiveOracle,
    SingleOracle,
    SoftmaxPolicy,
    action_probabilities,
    delegation_budget,
    enumerate_actions,
    log_prob,
    log_prob_gradient,
    params_from_text,
    params_to_text,
    sample_action,
)
from raocraft.runtime import RolloutLimits, run_rollout
from raocraft.world import crafting_depth, generate_task


def _cands(phi):
    return [ActionCandidate("craft", features=np.asarray(row, dtype=float)) for row in phi]


def _state(world, targets, depth=0, max_depth=6, budget=25, cap=25, start=None):
    return NodeState("0", depth, max_depth, budget, cap, dict(targets), dict(start or {}),
                     JobBook(world, targets))


def test_uniform_at_zero():
    p = action_probabilities(np.zeros(3), _cands(np.eye(3)))
    assert np.allclose(p, 1 / 3, atol=0, rtol=1e-15)


def test_two_candidate_probabilities():
    theta = np.array([math.log(3), 0.0])
    p = action_probabilities(theta, _cands([[1, 0], [0, 1]]))
    assert p == pytest.approx([0.75, 0.25], abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_probabilities_sum_to_one(k, seed):
    rng = np.random.default_rng(seed)
    theta = rng.normal(scale=5, size=FEATURE_DIM)
    cands = _cands(rng.normal(size=(k, FEATURE_DIM)))
    assert abs(action_probabilities(theta, cands).sum() - 1.0) <= 1e-12


def test_sampled_log_prob_matches_frequency():
    rng = np.random.default_rng(3)
    theta = rng.normal(size=FEATURE_DIM)
    cands = _cands(rng.normal(size=(4, FEATURE_DIM)))
    draws = 100_000
    r = random.Random(11)
    hits = np.zeros(4)
    reported = {}
    for _ in range(draws):
        c, lp = sample_action(theta, cands, r)
        i = next(j for j, x in enumerate(cands) if x is c)
        hits[i] += 1
        reported[i] = lp
    for i, lp in reported.items():
        p = math.exp(lp)
        sigma = math.sqrt(p * (1 - p) / draws)
        assert abs(hits[i] / draws - p) <= 3 * sigma
        assert lp == pytest.approx(log_prob(theta, cands, i), abs=1e-12)


def test_sampling_is_pure():
    rng = np.random.default_rng(0)
    theta = rng.normal(size=FEATURE_DIM)
    cands = _cands(rng.normal(size=(5, FEATURE_DIM)))
    a = [sample_action(theta, cands, random.Random(9))[1] for _ in range(3)]
    assert a[0] == a[1] == a[2]


def test_empty_candidates_rejected():
    with pytest.raises(PolicyError):
        sample_action(np.zeros(FEATURE_DIM), [], random.Random(0))


def test_gradient_finite_differences():
    rng = np.random.default_rng(42)
    h = 1e-5
    for _ in range(100):
        k = int(rng.integers(2, 8))
        cands = _cands(rng.normal(size=(k, FEATURE_DIM)))
        theta = rng.normal(size=FEATURE_DIM)
        chosen = int(rng.integers(k))
        g = log_prob_gradient(theta, cands, chosen)
        fd = np.zeros(FEATURE_DIM)
        for i in range(FEATURE_DIM):
            e = np.zeros(FEATURE_DIM)
            e[i] = h
            fd[i] = (log_prob(theta + e, cands, chosen) - log_prob(theta - e, cands, chosen)) / (2 * h)
        assert np.linalg.norm(g - fd) / max(np.linalg.norm(g), 1e-12) < 1e-6


def test_single_candidate_gradient_is_zero():
    c = _cands([np.arange(FEATURE_DIM)])
    assert np.all(log_prob_gradient(np.ones(FEATURE_DIM), c, c[0]) == 0)


def test_expected_score_is_zero():
    rng = np.random.default_rng(5)
    cands = _cands(rng.normal(size=(6, FEATURE_DIM)))
    theta = rng.normal(size=FEATURE_DIM)
    p = action_probabilities(theta, cands)
    mean = sum(p[i] * log_prob_gradient(theta, cands, i) for i in range(6))
    assert np.allclose(mean, 0, atol=1e-14)


def test_foreign_choice_rejected():
    cands = _cands(np.eye(2, FEATURE_DIM))
    other = _cands(np.eye(1, FEATURE_DIM))[0]
    with pytest.raises(PolicyError):
        log_prob_gradient(np.zeros(FEATURE_DIM), cands, other)
    with pytest.raises(PolicyError):
        log_prob_gradient(np.zeros(FEATURE_DIM), cands, 5)


# -- candidate enumeration --------------------------------------------------------------


def test_depth_three_delegate_budget(small_world):
    st_ = _state(small_world, {"deep4": 1})
    cands = enumerate_actions(st_, small_world, {"wood": 1, "ore": 2})
    dels = {c.targets[0][0]: c.budgets[0] for c in cands if c.kind == "delegate" and not c.group}
    assert crafting_depth(small_world, "mid3") == 3
    assert dels["mid3"] == 24
    assert delegation_budget(3, 20) == 20
    assert delegation_budget(1, 25) == 8


def test_finish_only_when_nothing_to_do(small_world):
    cands = enumerate_actions(_state(small_world, {"bar": 2}), small_world, {})
    assert [c.kind for c in cands] == ["finish"]


def test_satisfied_targets_offer_finish(small_world):
    st_ = _state(small_world, {"bar": 2})
    cands = enumerate_actions(st_, small_world, {"bar": 2})
    assert cands[0].kind == "finish"
    assert cands[0].features[0] == 1.0  # finish_done


def test_group_candidate_lists_independent_subtrees(small_world):
    # top5 needs deep4 and mid2, both of depth >= 2
    cands = enumerate_actions(_state(small_world, {"top5": 1}), small_world, {})
    groups = [c for c in cands if c.group]
    assert len(groups) == 1
    assert sorted(t for t, _ in groups[0].targets) == ["deep4", "mid2"]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 200), st.sampled_from(["easy", "medium", "hard"]), st.integers(0, 2**31))
def test_candidate_invariants(world, seed, diff, inv_seed):
    task, inv = generate_task(world, seed, diff)
    rng = random.Random(inv_seed)
    counts = {k: rng.randint(0, 4) * v for k, v in inv.snapshot().items()}
    state = _state(world, task.targets, depth=rng.randint(0, 6))
    cands = enumerate_actions(state, world, counts)
    assert cands and cands[0].kind == "finish"
    assert sum(c.kind == "finish" for c in cands) == 1
    for c in cands:
        assert c.features.shape == (FEATURE_DIM,)
        if c.kind == "craft":
            item, total = c.targets[0]
            recipe = world.recipes[item]
            ex = total // recipe.result_count
            assert all(counts.get(k, 0) >= v * ex for k, v in recipe.ingredients.items())
        if c.kind == "delegate":
            assert all(item in world.recipes for item, _ in c.targets)
            assert all(1 <= b <= state.steps_per_node for b in c.budgets)
    again = enumerate_actions(state, world, counts)
    assert [(c.kind, c.targets, c.budgets) for c in again] == [(c.kind, c.targets, c.budgets) for c in cands]


# -- oracles ------------------------------------------------------------------------------


def test_single_oracle_easy_with_large_budget(world):
    task, inv = generate_task(world, 0, "easy")
    tree = run_rollout(SingleOracle(), world, task, inv, RolloutLimits(12, 200), seed=0)
    assert tree.success and len(tree.nodes) == 1


def test_single_oracle_hard_budget_25_fails(world):
    task, inv = generate_task(world, 0, "hard")
    tree = run_rollout(SingleOracle(), world, task, inv, RolloutLimits(12, 25), seed=0)
    assert not tree.success


def test_recursive_oracle_hard(world):
    task, inv = generate_task(world, 0, "hard")
    tree = run_rollout(RecursiveOracle(), world, task, inv, RolloutLimits(12, 25), seed=0)
    assert tree.success and tree.max_depth >= 2


def test_zero_theta_greedy_finishes_immediately(world):
    task, inv = generate_task(world, 0, "medium")
    tree = run_rollout(SoftmaxPolicy(greedy=True), world, task, inv, RolloutLimits(), seed=0)
    assert tree.total_steps == 1 and not tree.success


# -- checkpoints --------------------------------------------------------------------------


@settings(max_examples=100)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=FEATURE_DIM,
                max_size=FEATURE_DIM))
def test_params_round_trip(values):
    theta = np.array(values)
    assert np.array_equal(params_from_text(params_to_text(theta)), theta)


def test_params_version_checked():
    text = params_to_text(np.zeros(FEATURE_DIM)).replace('"version": 1', '"version": 7')
    with pytest.raises(ValueError):
        params_from_text(text)


def test_non_finite_params_rejected():
    with pytest.raises(PolicyError):
        SoftmaxPolicy(np.full(FEATURE_DIM, np.nan))
    with pytest.raises(PolicyError):
        SoftmaxPolicy(np.zeros(3))
