"""Tests for propensity and outcome estimators."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prescribe_opt.data import Dataset, SyntheticConfig, gen_synthetic
from prescribe_opt.estimators import (
    CLIP_FLOOR,
    EmptyArmError,
    OutcomeModel,
    PropensityModel,
    load_model,
    outcome_matrix,
    propensity_scores,
    save_model,
)


def _cell_dataset():
    # x=0 rows logged 3:1 toward treatment 0, x=1 rows 1:3
    feats = np.array([[0]] * 4 + [[1]] * 4)
    treat = np.array([0, 0, 0, 1, 0, 1, 1, 1])
    return Dataset(
        features=feats,
        treatments=treat,
        outcomes=np.zeros(8),
        n_treatments=2,
        feature_names=("x",),
    )


class TestPropensityLogistic:
    def test_saturated_cells_recover_frequencies(self):
        # one binary feature saturates the model, so the MLE matches the
        # empirical cell frequencies
        pm = PropensityModel("logistic", tol=1e-8).fit(_cell_dataset())
        proba = pm.predict_proba(np.array([[0], [1]]))
        assert proba[0] == pytest.approx([0.75, 0.25], abs=1e-3)
        assert proba[1] == pytest.approx([0.25, 0.75], abs=1e-3)

    def test_rows_sum_to_one(self):
        tr, _ = gen_synthetic(SyntheticConfig(n_train=300, n_test=50, seed=1))
        pm = PropensityModel("logistic").fit(tr)
        assert np.allclose(pm.predict_proba(tr.features).sum(axis=1), 1.0)

    def test_tracks_true_scores(self):
        # the additive logit smooths the diagonal assignment boundary, so
        # rows near x1 = x2 keep an irreducible error; a constant-0.5
        # predictor would sit at MAE 0.25
        tr, _ = gen_synthetic(
            SyntheticConfig(n_train=2000, n_test=50, p_correct=0.75, seed=0)
        )
        pm = PropensityModel("logistic").fit(tr)
        mae = np.abs(pm.observed_scores(tr) - tr.true_propensity).mean()
        assert mae < 0.15


class TestPropensityCart:
    def test_laplace_leaf_probabilities(self):
        pm = PropensityModel("cart-classifier", max_depth=1).fit(_cell_dataset())
        proba = pm.predict_proba(np.array([[0], [1]]))
        # counts (3,1) with one pseudo-count per class
        assert proba[0] == pytest.approx([4 / 6, 2 / 6])
        assert proba[1] == pytest.approx([2 / 6, 4 / 6])

    def test_depth_zero_is_marginal(self):
        pm = PropensityModel("cart-classifier", max_depth=0).fit(_cell_dataset())
        proba = pm.predict_proba(np.array([[0], [1]]))
        assert np.allclose(proba[0], proba[1])
        assert proba[0] == pytest.approx([5 / 10, 5 / 10])

    def test_picks_informative_feature(self):
        rng = np.random.default_rng(3)
        noise = rng.integers(0, 2, 200)
        signal = rng.integers(0, 2, 200)
        treat = signal.copy()
        ds = Dataset(
            features=np.column_stack([noise, signal]),
            treatments=treat,
            outcomes=np.zeros(200),
            n_treatments=2,
        )
        pm = PropensityModel("cart-classifier", max_depth=1).fit(ds)
        assert pm._fitted["feature"] == 1


class TestPropensityTrueScores:
    def test_passthrough_and_clip(self):
        ds = Dataset(
            features=np.zeros((3, 1)),
            treatments=np.zeros(3, dtype=int),
            outcomes=np.zeros(3),
            n_treatments=1,
            true_propensity=np.array([0.005, 0.5, 1.0]),
        )
        pm = PropensityModel("true-scores").fit(ds)
        assert np.allclose(pm.observed_scores(ds), [CLIP_FLOOR, 0.5, 1.0])

    def test_requires_recorded_scores(self):
        ds = Dataset(
            features=np.zeros((2, 1)),
            treatments=np.zeros(2, dtype=int),
            outcomes=np.zeros(2),
            n_treatments=1,
        )
        with pytest.raises(ValueError):
            PropensityModel("true-scores").fit(ds)

    def test_no_full_matrix(self):
        tr, _ = gen_synthetic(SyntheticConfig(n_train=50, n_test=50, seed=0))
        pm = PropensityModel("true-scores").fit(tr)
        with pytest.raises(ValueError):
            pm.predict_proba(tr.features)


class TestOutcomeLinear:
    def test_exact_on_noiseless_linear(self):
        rng = np.random.default_rng(0)
        x = rng.integers(0, 2, (120, 3))
        treat = rng.integers(0, 2, 120)
        y = np.where(treat == 0, 2.0 + 3.0 * x[:, 0] - x[:, 1], -1.0 + x[:, 2])
        ds = Dataset(features=x, treatments=treat, outcomes=y, n_treatments=2)
        om = OutcomeModel("linear").fit(ds)
        assert np.allclose(om.predict(x, 0), 2.0 + 3.0 * x[:, 0] - x[:, 1], atol=1e-5)
        assert np.allclose(om.predict(x, 1), -1.0 + x[:, 2], atol=1e-5)

    def test_empty_arm(self):
        ds = Dataset(
            features=np.zeros((4, 1)),
            treatments=np.zeros(4, dtype=int),
            outcomes=np.ones(4),
            n_treatments=2,
        )
        with pytest.raises(EmptyArmError, match="1"):
            OutcomeModel("linear").fit(ds)

    def test_matrix_shape(self):
        tr, _ = gen_synthetic(SyntheticConfig(n_train=100, n_test=50, seed=4))
        om = OutcomeModel("linear").fit(tr)
        assert om.matrix(tr.features).shape == (100, 2)


class TestOutcomeLasso:
    def test_huge_alpha_gives_arm_means(self):
        tr, _ = gen_synthetic(SyntheticConfig(n_train=200, n_test=50, seed=2))
        om = OutcomeModel("lasso", alpha=1e6).fit(tr)
        for k in (0, 1):
            coef, intercept = om._arms[k]
            assert np.all(coef == 0.0)
            assert intercept == pytest.approx(tr.outcomes[tr.treatments == k].mean())

    def test_kkt_conditions(self):
        tr, _ = gen_synthetic(SyntheticConfig(n_train=400, n_test=50, seed=7))
        alpha = 0.08
        om = OutcomeModel("lasso", alpha=alpha).fit(tr)
        for k in (0, 1):
            mask = tr.treatments == k
            x = tr.features[mask].astype(float)
            y = tr.outcomes[mask]
            coef, _ = om._arms[k]
            mean, sd = x.mean(axis=0), x.std(axis=0)
            live = sd > 0
            xs = np.zeros_like(x)
            xs[:, live] = (x[:, live] - mean[live]) / sd[live]
            bs = coef * sd
            resid = (y - y.mean()) - xs @ bs
            grad = np.abs(xs.T @ resid / len(y))
            inactive = (bs == 0) & live
            if inactive.any():
                assert grad[inactive].max() <= alpha + 1e-6
            active = bs != 0
            if active.any():
                assert np.abs(grad[active] - alpha).max() <= 1e-5


class TestOutcomeTrees:
    def test_cart_fits_step_function(self):
        rng = np.random.default_rng(1)
        x = rng.integers(0, 2, (100, 4))
        y = 3.0 * x[:, 2]
        ds = Dataset(
            features=x, treatments=np.zeros(100, dtype=int), outcomes=y, n_treatments=1
        )
        om = OutcomeModel("cart-regressor", max_depth=1).fit(ds)
        assert np.allclose(om.predict(x, 0), y)

    def test_cart_depth_zero_is_mean(self):
        tr, _ = gen_synthetic(SyntheticConfig(n_train=80, n_test=50, seed=3))
        om = OutcomeModel("cart-regressor", max_depth=0).fit(tr)
        k0 = tr.treatments == 0
        assert np.allclose(om.predict(tr.features, 0), tr.outcomes[k0].mean())

    def test_forest_deterministic_under_seed(self):
        tr, _ = gen_synthetic(SyntheticConfig(n_train=150, n_test=50, seed=5))
        a = OutcomeModel("random-forest", n_trees=8, seed=11).fit(tr)
        b = OutcomeModel("random-forest", n_trees=8, seed=11).fit(tr)
        assert np.array_equal(a.matrix(tr.features), b.matrix(tr.features))

    def test_forest_seed_changes_fit(self):
        tr, _ = gen_synthetic(SyntheticConfig(n_train=150, n_test=50, seed=5))
        a = OutcomeModel("random-forest", n_trees=8, seed=1).fit(tr)
        b = OutcomeModel("random-forest", n_trees=8, seed=2).fit(tr)
        assert not np.array_equal(a.matrix(tr.features), b.matrix(tr.features))


class TestPassthrough:
    def test_propensity_vector(self):
        tr, _ = gen_synthetic(SyntheticConfig(n_train=40, n_test=50, seed=0))
        mu = np.full(40, 0.004)
        assert np.allclose(propensity_scores(mu, tr), CLIP_FLOOR)

    def test_propensity_matrix_selects_observed(self):
        tr, _ = gen_synthetic(SyntheticConfig(n_train=40, n_test=50, seed=0))
        proba = np.column_stack([np.full(40, 0.3), np.full(40, 0.7)])
        out = propensity_scores(proba, tr)
        assert np.allclose(out, np.where(tr.treatments == 0, 0.3, 0.7))

    def test_outcome_matrix_passthrough(self):
        tr, _ = gen_synthetic(SyntheticConfig(n_train=40, n_test=50, seed=0))
        assert np.array_equal(outcome_matrix(tr.counterfactuals, tr), tr.counterfactuals)

    def test_shape_errors(self):
        tr, _ = gen_synthetic(SyntheticConfig(n_train=40, n_test=50, seed=0))
        with pytest.raises(ValueError):
            propensity_scores(np.ones(7), tr)
        with pytest.raises(ValueError):
            outcome_matrix(np.ones((40, 5)), tr)


class TestSerialization:
    @pytest.mark.parametrize("kind", ["linear", "lasso", "cart-regressor", "random-forest"])
    def test_outcome_round_trip(self, kind, tmp_path):
        tr, _ = gen_synthetic(SyntheticConfig(n_train=120, n_test=50, seed=6))
        om = OutcomeModel(kind, n_trees=4).fit(tr)
        path = tmp_path / "m.json"
        save_model(om, str(path))
        back = load_model(str(path))
        assert np.allclose(back.matrix(tr.features), om.matrix(tr.features))

    @pytest.mark.parametrize("kind", ["logistic", "cart-classifier"])
    def test_propensity_round_trip(self, kind, tmp_path):
        tr, _ = gen_synthetic(SyntheticConfig(n_train=120, n_test=50, seed=6))
        pm = PropensityModel(kind).fit(tr)
        path = tmp_path / "m.json"
        save_model(pm, str(path))
        back = load_model(str(path))
        assert np.allclose(back.observed_scores(tr), pm.observed_scores(tr))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), alpha=st.floats(0.01, 0.5))
def test_lasso_never_beats_gradient_bound(seed, alpha):
    # KKT: every coordinate's standardized gradient magnitude is at most alpha
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 2, (60, 5))
    y = rng.normal(size=60)
    ds = Dataset(
        features=x, treatments=np.zeros(60, dtype=int), outcomes=y, n_treatments=1
    )
    om = OutcomeModel("lasso", alpha=alpha).fit(ds)
    coef, _ = om._arms[0]
    mean, sd = x.mean(axis=0), x.std(axis=0)
    live = sd > 0
    xs = np.zeros((60, 5))
    xs[:, live] = (x[:, live].astype(float) - mean[live]) / sd[live]
    resid = (y - y.mean()) - xs @ (coef * sd)
    grad = np.abs(xs.T @ resid / 60)
    assert grad[live].max() <= alpha + 1e-6
