"""Tests for the exhaustive tree search and baseline solvers."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prescribe_opt.data import (
    Dataset,
    gen_confounded_binary,
    gen_confounded_graded,
)
from prescribe_opt.exact import (
    CapExceededError,
    GroupMeanScorer,
    SumScorer,
    brute_force_best_policy,
    enumerate_trees,
    enumerate_value,
    scorer_for,
    solve_bpt,
    solve_kpt,
    structure_count,
)
from prescribe_opt.policy import evaluate


def _naive_best(feats, depth, scorer, early_predict=True):
    """Reference maximizer: explicit recursion over all structures."""

    def rec(mask, d):
        scores = scorer.leaf_scores(mask)
        best = float(scores.max())
        if d == 0:
            return best
        branch_vals = [
            rec(mask & (feats[:, f] == 0), d - 1) + rec(mask & (feats[:, f] == 1), d - 1)
            for f in range(feats.shape[1])
        ]
        if not early_predict:
            return max(branch_vals)
        return max([best] + branch_vals)

    return rec(np.ones(len(feats), dtype=bool), depth)


class TestStructureCount:
    def test_known_values(self):
        assert structure_count(3, 0) == 1
        assert structure_count(3, 1) == 4
        assert structure_count(3, 2) == 49
        assert structure_count(18, 2) == 6499

    def test_caps(self):
        feats = np.zeros((4, 11), dtype=np.int8)
        scorer = SumScorer(np.zeros((4, 2)))
        with pytest.raises(CapExceededError, match="cap"):
            enumerate_trees(feats, 3, scorer)
        with pytest.raises(CapExceededError):
            enumerate_trees(np.zeros((4, 2), np.int8), 4, SumScorer(np.zeros((4, 2))))

    def test_depth_three_small_f_allowed(self):
        rng = np.random.default_rng(0)
        feats = rng.integers(0, 2, (30, 4)).astype(np.int8)
        scorer = SumScorer(rng.normal(size=(30, 2)))
        tree, val = enumerate_trees(feats, 3, scorer)
        assert tree.depth == 3


class TestEnumeration:
    def test_matches_naive_recursion(self):
        rng = np.random.default_rng(5)
        feats = rng.integers(0, 2, (40, 3)).astype(np.int8)
        scorer = SumScorer(rng.normal(size=(40, 2)))
        tree, val = enumerate_trees(feats, 2, scorer)
        assert val == pytest.approx(_naive_best(feats, 2, scorer), abs=1e-9)

    def test_reported_value_matches_rescoring(self):
        rng = np.random.default_rng(6)
        feats = rng.integers(0, 2, (60, 4)).astype(np.int8)
        ds = Dataset(
            features=feats,
            treatments=rng.integers(0, 2, 60),
            outcomes=rng.normal(size=60),
            n_treatments=2,
        )
        scorer = SumScorer(rng.normal(size=(60, 2)))
        tree, val = enumerate_trees(feats, 2, scorer)
        assert enumerate_value(ds, tree, scorer) == pytest.approx(val, abs=1e-9)

    def test_deeper_never_worse(self):
        rng = np.random.default_rng(7)
        feats = rng.integers(0, 2, (50, 5)).astype(np.int8)
        scorer = SumScorer(rng.normal(size=(50, 3)))
        vals = [enumerate_trees(feats, d, scorer)[1] for d in (0, 1, 2)]
        assert vals[0] <= vals[1] + 1e-9 <= vals[2] + 2e-9

    def test_full_branching_flag(self):
        feats = np.zeros((10, 2), dtype=np.int8)
        # constant features make branching useless; prediction must still
        # be pushed to the bottom when early prediction is disabled
        scorer = SumScorer(np.ones((10, 2)))
        tree, _ = enumerate_trees(feats, 1, scorer, early_predict=False)
        assert tree.nodes[1][0] == "branch"
        tree2, _ = enumerate_trees(feats, 1, scorer, early_predict=True)
        assert tree2.nodes[1][0] == "predict"

    def test_canonical_tie_break(self):
        feats = np.array([[0, 1], [1, 0]], dtype=np.int8)
        scorer = SumScorer(np.zeros((2, 2)))
        tree, val = enumerate_trees(feats, 2, scorer)
        assert tree.nodes == {1: ("predict", 0)}
        assert val == 0.0


class TestTrueScorer:
    def test_graded_depth_one_optimum(self):
        ds = gen_confounded_graded(200)
        tree, v = brute_force_best_policy(ds, 1)
        assert v == pytest.approx(1.1)
        assert tree.nodes[1] == ("branch", 0)
        assert evaluate(tree, ds).true_value == pytest.approx(1.1)

    def test_unshifted_depth_one_optimum(self):
        ds = gen_confounded_graded(200, shift=False)
        tree, v = brute_force_best_policy(ds, 1)
        assert v == pytest.approx(0.6)
        assert tree.nodes == {
            1: ("branch", 0),
            2: ("predict", 0),
            3: ("predict", 1),
        }

    def test_depth_zero_best_constant(self):
        ds = gen_confounded_graded(200)
        tree, v = brute_force_best_policy(ds, 0)
        # both constant arms earn exactly 1.0; ties go to the lower arm
        assert v == pytest.approx(1.0)
        assert tree.nodes[1] == ("predict", 0)


class TestBaselineKpt:
    def test_graded_picks_level_feature(self):
        # the outcome-level feature wins despite carrying no effect signal
        ds = gen_confounded_graded(200)
        tree, est = solve_kpt(ds, 1)
        assert tree.nodes[1] == ("branch", 1)
        assert est == pytest.approx(1.4)
        assert evaluate(tree, ds).true_value == pytest.approx(1.0)

    def test_unshifted_overestimates(self):
        ds = gen_confounded_graded(200, shift=False)
        tree, est = solve_kpt(ds, 1)
        assert tree.nodes[1] == ("branch", 1)
        assert est == pytest.approx(0.9)
        assert evaluate(tree, ds).true_value == pytest.approx(0.5)

    def test_leaf_means_oracle(self):
        # hand check: x2 = 0 leaf holds arm-0 rows with means .9 over the
        # confounded mix, arm-1 rows with mean .26
        ds = gen_confounded_graded(200, shift=False)
        scorer = scorer_for("kpt", ds)
        mask = ds.features[:, 1] == 0
        scores = scorer.leaf_scores(mask)
        n_leaf = mask.sum()
        assert scores[0] / n_leaf == pytest.approx(0.9)
        assert scores[1] / n_leaf == pytest.approx(0.26)

    def test_empty_arm_scores_zero(self):
        ds = Dataset(
            features=np.array([[0], [1]], dtype=np.int8),
            treatments=np.array([0, 0]),
            outcomes=np.array([2.0, 4.0]),
            n_treatments=2,
        )
        scorer = scorer_for("kpt", ds)
        scores = scorer.leaf_scores(np.ones(2, dtype=bool))
        assert scores[1] == 0.0  # never-logged arm gets the pessimistic floor

    def test_shift_invariance_of_chosen_tree(self):
        ds = gen_confounded_graded(200)
        shifted = Dataset(
            features=ds.features,
            treatments=ds.treatments,
            outcomes=ds.outcomes + 7.5,
            n_treatments=2,
            counterfactuals=ds.counterfactuals + 7.5,
            true_propensity=ds.true_propensity,
        )
        t1, e1 = solve_kpt(ds, 1)
        t2, e2 = solve_kpt(shifted, 1)
        assert t1.nodes == t2.nodes
        assert e2 == pytest.approx(e1 + 7.5)


class TestBaselineBpt:
    def test_graded_prefers_fit(self):
        # the level feature explains outcome variance, so every mixing
        # weight keeps it: fit 12.24 against 50 swamps the value gap
        ds = gen_confounded_graded(200)
        for theta in (0.1, 0.5, 0.9):
            tree, info = solve_bpt(ds, 1, theta)
            assert tree.nodes[1] == ("branch", 1)
            assert info["sse"] == pytest.approx(12.24)
            assert info["assignment"] == pytest.approx(1.4)

    def test_zero_variance_prefers_assignment(self):
        # with zero residual variance everywhere the fit term is silent
        # and the assignment term decides
        ds = gen_confounded_graded(200, shift=False)
        tree, info = solve_bpt(ds, 1, 0.1)
        assert tree.nodes[1] == ("branch", 0)
        assert info["sse"] == pytest.approx(0.0)

    def test_theta_one_matches_baseline(self):
        ds = gen_confounded_binary(200, seed=1)
        t_b, info = solve_bpt(ds, 1, 1.0)
        t_k, est = solve_kpt(ds, 1)
        assert info["assignment"] == pytest.approx(est)
        assert t_b.nodes == t_k.nodes

    def test_theta_validated(self):
        ds = gen_confounded_binary(200, seed=1)
        with pytest.raises(ValueError):
            solve_bpt(ds, 1, 1.5)


class TestScorerFactories:
    def test_ipw_clinic_optimum(self):
        # two-state clinic: treating only the unhealthy scores 41/50
        x = np.array([1] * 30 + [0] * 20)
        treat = np.array([1] * 6 + [0] * 24 + [1] * 10 + [0] * 10)
        y = np.concatenate([
            [1, 1, 1, 1, 1, 0.0],
            [1] * 12 + [0] * 12,
            [1] * 5 + [0] * 5,
            [1] * 8 + [0] * 2,
        ]).astype(float)
        mu = np.where(x == 1, np.where(treat == 1, 0.2, 0.8), 0.5)
        ds = Dataset(
            features=x.reshape(-1, 1), treatments=treat, outcomes=y,
            n_treatments=2, true_propensity=mu,
        )
        tree, val = enumerate_trees(ds.features, 1, scorer_for("ipw", ds, mu))
        assert val / ds.n_rows == pytest.approx(0.82)
        assert tree.nodes == {1: ("branch", 0), 2: ("predict", 0), 3: ("predict", 1)}

    def test_dm_with_oracle_matches_true(self):
        ds = gen_confounded_graded(120)
        s_dm = scorer_for("dm", ds, outcome=ds.counterfactuals)
        s_true = scorer_for("true", ds)
        mask = ds.features[:, 0] == 1
        assert np.allclose(s_dm.leaf_scores(mask), s_true.leaf_scores(mask))

    def test_dr_with_oracle_outcome_equals_dm(self):
        ds = gen_confounded_binary(150, seed=3)
        s_dr = scorer_for("dr", ds, ds.true_propensity, ds.counterfactuals)
        s_dm = scorer_for("dm", ds, outcome=ds.counterfactuals)
        mask = ds.features[:, 1] == 0
        assert np.allclose(s_dr.leaf_scores(mask), s_dm.leaf_scores(mask))

    def test_dr_with_zero_outcome_equals_ipw(self):
        ds = gen_confounded_binary(150, seed=4)
        zero = np.zeros((150, 2))
        s_dr = scorer_for("dr", ds, ds.true_propensity, zero)
        s_ipw = scorer_for("ipw", ds, ds.true_propensity)
        mask = ds.features[:, 0] == 1
        assert np.allclose(s_dr.leaf_scores(mask), s_ipw.leaf_scores(mask))

    def test_unknown_method(self):
        ds = gen_confounded_binary(40, seed=0)
        with pytest.raises(ValueError):
            scorer_for("nope", ds)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), depth=st.integers(0, 2))
def test_dp_equals_naive(seed, depth):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 25))
    feats = rng.integers(0, 2, (n, 3)).astype(np.int8)
    scorer = SumScorer(rng.normal(size=(n, 2)))
    _, val = enumerate_trees(feats, depth, scorer)
    assert val == pytest.approx(_naive_best(feats, depth, scorer), abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_group_mean_scorer_bounds(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 30))
    treat = rng.integers(0, 3, n)
    y = rng.uniform(0, 5, n)
    scorer = GroupMeanScorer(treat, y, 3, 0.0)
    mask = rng.random(n) < 0.7
    scores = scorer.leaf_scores(mask)
    if mask.any():
        # every leaf score is leaf-size times a mean of nonnegative values
        assert scores.min() >= 0.0
        assert scores.max() <= mask.sum() * y.max() + 1e-9
    assert scorer.group_variance(mask) >= -1e-9
