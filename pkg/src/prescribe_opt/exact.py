"""Exhaustive search over tree structures by shared-subproblem enumeration.

The number of distinct tree structures of depth ``d`` over ``F`` features
follows ``S(d) = 1 + F * S(d-1)**2`` with ``S(0) = 1`` (either predict, or
pick a branching feature and choose both subtrees). Direct enumeration is
therefore hopeless beyond shallow trees, but the optimal subtree below a
node depends only on the subset of rows reaching it and the remaining
depth, so dynamic programming over (row subset, depth) pairs visits each
distinct subproblem once. Subsets are keyed by their boolean mask bytes.

Scorers reduce a leaf's rows to one number per treatment in sum form (no
division by the dataset size), which keeps leaf contributions additive
across leaves; callers rescale at the end. The same machinery solves the
tree-restricted baseline objectives, whose leaf scores are means over the
rows of each logged arm rather than sums of per-row terms.
"""

from __future__ import annotations

import numpy as np

from .data import Dataset
from .estimators import outcome_matrix, propensity_scores
from .policy import PrescriptiveTree

#: enumeration guardrails: depth 3 only with a small feature count
MAX_DEPTH = 3
MAX_FEATURES_AT_MAX_DEPTH = 10


class CapExceededError(ValueError):
    """Requested enumeration is too large to run exactly."""


def structure_count(n_features: int, depth: int) -> int:
    """Number of distinct tree structures: ``S(d) = 1 + F * S(d-1)^2``."""
    count = 1
    for _ in range(depth):
        count = 1 + n_features * count * count
    return count


def _check_caps(n_features: int, depth: int) -> None:
    if depth > MAX_DEPTH or (depth == MAX_DEPTH and n_features > MAX_FEATURES_AT_MAX_DEPTH):
        raise CapExceededError(
            f"depth {depth} with {n_features} features enumerates "
            f"{structure_count(n_features, depth)} structures; "
            f"the cap is depth {MAX_DEPTH} with at most "
            f"{MAX_FEATURES_AT_MAX_DEPTH} features"
        )


# -- leaf scorers ---------------------------------------------------------------


class SumScorer:
    """Leaf scores that are per-treatment sums of per-row terms.

    ``terms`` has one column per treatment; a leaf's score for treatment k
    is the column-k sum over the leaf's rows.
    """

    def __init__(self, terms: np.ndarray, objective_constant: float = 0.0):
        self.terms = np.asarray(terms, dtype=np.float64)
        self.objective_constant = objective_constant

    @property
    def n_rows(self) -> int:
        return self.terms.shape[0]

    @property
    def n_treatments(self) -> int:
        return self.terms.shape[1]

    def leaf_scores(self, mask: np.ndarray) -> np.ndarray:
        return self.terms[mask].sum(axis=0)


class GroupMeanScorer:
    """Leaf scores for the baseline estimator: leaf size times arm mean.

    A leaf scores ``N_leaf * mean(shifted Y over the leaf's arm-k rows)``
    for treatment k, and zero when the leaf holds no arm-k rows, which is
    the pessimistic convention for shifted (nonnegative) outcomes. Outcomes
    are shifted by the dataset minimum; ``objective_constant`` restores raw
    units in the aggregate.
    """

    def __init__(self, treatments, shifted, n_treatments, objective_constant, weights=None):
        self.treatments = np.asarray(treatments)
        self.shifted = np.asarray(shifted, dtype=np.float64)
        self._k = int(n_treatments)
        self.objective_constant = objective_constant
        self.weights = np.ones(len(self.treatments)) if weights is None else np.asarray(weights, dtype=np.float64)

    @property
    def n_rows(self) -> int:
        return len(self.treatments)

    @property
    def n_treatments(self) -> int:
        return self._k

    def leaf_scores(self, mask: np.ndarray) -> np.ndarray:
        k = self.treatments[mask]
        w = self.weights[mask]
        counts = np.bincount(k, weights=w, minlength=self._k)
        sums = np.bincount(k, weights=w * self.shifted[mask], minlength=self._k)
        out = np.zeros(self._k)
        present = counts > 0
        out[present] = w.sum() * sums[present] / counts[present]
        return out

    def group_variance(self, mask: np.ndarray) -> float:
        """Within-(leaf, arm) weighted sum of squared deviations from the arm mean."""
        k = self.treatments[mask]
        w = self.weights[mask]
        y = self.shifted[mask]
        counts = np.bincount(k, weights=w, minlength=self._k)
        sums = np.bincount(k, weights=w * y, minlength=self._k)
        sq = np.bincount(k, weights=w * y * y, minlength=self._k)
        present = counts > 0
        return float((sq[present] - sums[present] ** 2 / counts[present]).sum())


def scorer_for(method: str, ds: Dataset, propensity=None, outcome=None):
    """Build the leaf scorer matching a policy-value estimator.

    Parameters
    ----------
    method : {"ipw", "dm", "dr", "kpt", "true"}
        Which objective the enumeration should maximize. "true" scores
        against the dataset's counterfactual columns.
    propensity, outcome
        Nuisance sources as accepted by the estimator passthroughs;
        required by the methods that use them.
    """
    n = ds.n_rows
    if method == "ipw":
        mu = propensity_scores(propensity, ds)
        terms = np.zeros((n, ds.n_treatments))
        terms[np.arange(n), ds.treatments] = ds.outcomes / mu
        return SumScorer(terms)
    if method == "dm":
        return SumScorer(outcome_matrix(outcome, ds))
    if method == "dr":
        mu = propensity_scores(propensity, ds)
        nu = outcome_matrix(outcome, ds)
        terms = nu.copy()
        resid = (ds.outcomes - nu[np.arange(n), ds.treatments]) / mu
        terms[np.arange(n), ds.treatments] += resid
        return SumScorer(terms)
    if method == "kpt":
        shift = float(ds.outcomes.min()) if n else 0.0
        return GroupMeanScorer(
            ds.treatments, ds.outcomes - shift, ds.n_treatments,
            objective_constant=shift * n,
        )
    if method == "true":
        if ds.counterfactuals is None:
            raise ValueError("method 'true' requires counterfactual columns")
        return SumScorer(ds.counterfactuals)
    raise ValueError(f"unknown method {method!r}")


# -- enumeration ----------------------------------------------------------------


def enumerate_trees(
    ds_features: np.ndarray,
    depth: int,
    scorer,
    early_predict: bool = True,
) -> tuple[PrescriptiveTree, float]:
    """Find a tree maximizing the scorer's summed leaf values.

    Parameters
    ----------
    ds_features : ndarray of {0,1}, shape (n, F)
        Covariates the tree may branch on.
    depth : int
        Maximum depth; guarded by the enumeration caps.
    scorer
        Object with ``n_rows``, ``n_treatments``, and
        ``leaf_scores(mask) -> (n_treatments,)``; scores must be in sum
        form so leaf contributions add.
    early_predict : bool
        Allow predicting above the maximum depth. The baseline objectives
        require full branching, in which case internal nodes always split
        (on the lowest feature when nothing distinguishes them).

    Returns
    -------
    (PrescriptiveTree, float)
        An optimal tree (deterministic canonical choice among ties:
        predict before branch, lower treatment first, lower feature first)
        and its total score, ``scorer.objective_constant`` included.

    Notes
    -----
    Complexity is governed by the number of distinct (subset, depth) pairs,
    which is far below the raw structure count ``S(d)`` whenever different
    branching orders reach identical row subsets.
    """
    feats = np.asarray(ds_features)
    n, n_features = feats.shape
    _check_caps(n_features, depth)
    if scorer.n_rows != n:
        raise ValueError("scorer row count does not match the feature matrix")
    cols = [feats[:, f] == 1 for f in range(n_features)]
    memo: dict = {}

    def best(mask: np.ndarray, d: int):
        key = (mask.tobytes(), d)
        hit = memo.get(key)
        if hit is not None:
            return hit
        scores = scorer.leaf_scores(mask)
        k_star = int(np.argmax(scores))
        value, plan = float(scores[k_star]), ("predict", k_star)
        if d > 0:
            for f in range(n_features):
                left = mask & ~cols[f]
                right = mask & cols[f]
                vl, pl = best(left, d - 1)
                vr, pr = best(right, d - 1)
                cand = vl + vr
                if cand > value + 1e-12 or (not early_predict and plan[0] == "predict"):
                    value, plan = cand, ("branch", f, pl, pr)
        memo[key] = (value, plan)
        return value, plan

    root_value, root_plan = best(np.ones(n, dtype=bool), depth)

    nodes: dict = {}

    def emit(plan, idx):
        if plan[0] == "predict":
            nodes[idx] = ("predict", plan[1])
        else:
            nodes[idx] = ("branch", plan[1])
            emit(plan[2], 2 * idx)
            emit(plan[3], 2 * idx + 1)

    emit(root_plan, 1)
    tree = PrescriptiveTree(depth=depth, nodes=nodes, provenance={"solver": "exact"})
    return tree, root_value + getattr(scorer, "objective_constant", 0.0)


def brute_force_best_policy(ds: Dataset, depth: int) -> tuple[PrescriptiveTree, float]:
    """Best-possible tree against known potential outcomes, per-capita value."""
    tree, total = enumerate_trees(ds.features, depth, scorer_for("true", ds))
    return tree, total / ds.n_rows


def solve_kpt(ds: Dataset, depth: int, propensity=None, outcome=None) -> tuple[PrescriptiveTree, float]:
    """Tree-restricted baseline: per-leaf logged-arm means, full branching.

    Returns the optimal full tree and its estimate of the policy value
    (per capita, raw outcome units; leaves whose chosen arm has no logged
    rows contribute the dataset minimum, the pessimistic convention).
    """
    scorer = scorer_for("kpt", ds)
    tree, total = enumerate_trees(ds.features, depth, scorer, early_predict=False)
    return tree, total / ds.n_rows


def solve_bpt(ds: Dataset, depth: int, theta: float) -> tuple[PrescriptiveTree, dict]:
    """Accuracy-traded baseline: blend assignment value with model fit.

    Maximizes ``theta * Q - (1 - theta) * SSE`` over full trees, where Q is
    the per-capita baseline estimate of the assignment's value and SSE the
    summed squared residuals of per-(leaf, logged arm) mean predictions.
    The SSE term depends only on the branching structure, so each leaf's
    contribution splits into an assignment part (maximized over the
    prescribed arm) and a structural penalty; their sum stays additive and
    the same enumeration applies.

    Returns
    -------
    (PrescriptiveTree, dict)
        The optimal tree and the decomposition ``{"score", "assignment",
        "sse"}`` with the assignment term in per-capita raw units.
    """
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must be in [0, 1]")
    base = scorer_for("kpt", ds)
    n = ds.n_rows

    class _Blend:
        n_rows = n
        n_treatments = ds.n_treatments
        objective_constant = theta * base.objective_constant / n

        def leaf_scores(self, mask):
            assign = theta * base.leaf_scores(mask) / n
            return assign - (1.0 - theta) * base.group_variance(mask)

    tree, score = enumerate_trees(ds.features, depth, _Blend(), early_predict=False)
    # recover the decomposition from the winning tree
    q_hat = enumerate_value(ds, tree, base) / n
    masks = _leaf_masks(ds.features, tree)
    sse = float(sum(base.group_variance(m) for m in masks.values()))
    return tree, {"score": score, "assignment": q_hat, "sse": sse}


def enumerate_value(ds: Dataset, tree: PrescriptiveTree, scorer) -> float:
    """Total score a fixed tree earns under a scorer (constant included)."""
    total = 0.0
    for n_idx, mask in _leaf_masks(ds.features, tree).items():
        scores = scorer.leaf_scores(mask)
        action = tree.nodes[n_idx]
        if action[0] == "predict":
            total += float(scores[action[1]])
        else:
            total += float(scores @ np.asarray(action[1]))
    return total + getattr(scorer, "objective_constant", 0.0)


def _leaf_masks(features: np.ndarray, tree: PrescriptiveTree) -> dict:
    """Boolean row mask of every terminal node, keyed by node index."""
    n = len(features)
    node_of = np.ones(n, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    while not done.all():
        for n_idx in np.unique(node_of[~done]):
            rows = ~done & (node_of == n_idx)
            action = tree.nodes[n_idx]
            if action[0] == "branch":
                node_of[rows] = 2 * n_idx + features[rows, action[1]]
            else:
                done |= rows
    return {
        n_idx: (node_of == n_idx)
        for n_idx in np.unique(node_of)
    }
