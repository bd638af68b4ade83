"""Nuisance models: propensity scores and counterfactual outcome regressions.

Weighting-based policy scores divide by an estimate of the logging
probability ``mu(k, x) = P(K = k | X = x)``; regression-based scores replace
outcomes with per-treatment predictions ``nu_k(x) = E[Y | K = k, X = x]``.
This module provides small self-contained fitters for both, plus passthrough
hooks so a caller can supply exact scores when the logging mechanism is
known. All fitters consume the binary feature matrices produced by
:mod:`prescribe_opt.data` and are deterministic given their seed.
"""

from __future__ import annotations

import json

import numpy as np

from .data import Dataset

#: floor applied to estimated logging probabilities before any division
CLIP_FLOOR = 0.01


class DegenerateFitError(RuntimeError):
    """A fit produced non-finite parameters."""


class EmptyArmError(ValueError):
    """A per-treatment regression received no rows for some treatment."""


# -- decision tree primitives --------------------------------------------------


def _gini(counts: np.ndarray) -> float:
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return float(1.0 - (p * p).sum())


def _grow_classifier(x, y, n_classes, depth, feature_pool, rng):
    """Recursively grow a classification tree node.

    Splits on ``x[:, f] == 1`` choosing the feature with the lowest
    Gini-weighted child impurity; returns a nested dict. Leaf probabilities
    are Laplace smoothed with one pseudo-count per class, so no class ever
    gets probability zero.
    """
    counts = np.bincount(y, minlength=n_classes).astype(float)
    leaf = {"probs": ((counts + 1.0) / (counts.sum() + n_classes)).tolist()}
    if depth == 0 or len(y) < 2 or counts.max() == len(y):
        return leaf
    base = _gini(counts)
    best, best_f = 0.0, -1
    pool = feature_pool if rng is None else rng.choice(
        feature_pool, size=min(len(feature_pool), max(1, len(feature_pool) // 3)),
        replace=False,
    )
    for f in sorted(pool):
        mask = x[:, f] == 1
        nl = int(mask.sum())
        if nl == 0 or nl == len(y):
            continue
        ci = np.bincount(y[mask], minlength=n_classes).astype(float)
        co = counts - ci
        gain = base - (nl * _gini(ci) + (len(y) - nl) * _gini(co)) / len(y)
        if gain > best + 1e-12:
            best, best_f = gain, f
    if best_f < 0:
        return leaf
    mask = x[:, best_f] == 1
    return {
        "feature": int(best_f),
        "right": _grow_classifier(x[mask], y[mask], n_classes, depth - 1, feature_pool, rng),
        "left": _grow_classifier(x[~mask], y[~mask], n_classes, depth - 1, feature_pool, rng),
    }


def _grow_regressor(x, y, depth, feature_pool, rng):
    """Variance-reduction regression tree; same conventions as the classifier."""
    leaf = {"value": float(y.mean())}
    if depth == 0 or len(y) < 2 or np.ptp(y) == 0.0:
        return leaf
    base = float(((y - y.mean()) ** 2).sum())
    best, best_f = 0.0, -1
    pool = feature_pool if rng is None else rng.choice(
        feature_pool, size=min(len(feature_pool), max(1, len(feature_pool) // 3)),
        replace=False,
    )
    for f in sorted(pool):
        mask = x[:, f] == 1
        nl = int(mask.sum())
        if nl == 0 or nl == len(y):
            continue
        yi, yo = y[mask], y[~mask]
        sse = float(((yi - yi.mean()) ** 2).sum() + ((yo - yo.mean()) ** 2).sum())
        if base - sse > best + 1e-12:
            best, best_f = base - sse, f
    if best_f < 0:
        return leaf
    mask = x[:, best_f] == 1
    return {
        "feature": int(best_f),
        "right": _grow_regressor(x[mask], y[mask], depth - 1, feature_pool, rng),
        "left": _grow_regressor(x[~mask], y[~mask], depth - 1, feature_pool, rng),
    }


def _tree_apply(node: dict, x: np.ndarray, key: str) -> np.ndarray:
    if key in node:
        val = np.asarray(node[key], dtype=np.float64)
        shape = (len(x),) if val.ndim == 0 else (len(x), len(val))
        return np.broadcast_to(val, shape).copy()
    mask = x[:, node["feature"]] == 1
    out = None
    for side, sub in (("right", mask), ("left", ~mask)):
        vals = _tree_apply(node[side], x[sub], key)
        if out is None:
            out = np.empty((len(x),) + vals.shape[1:], dtype=np.float64)
        out[sub] = vals
    return out


# -- propensity models ---------------------------------------------------------


class PropensityModel:
    """Estimator of the logging probability of the observed treatment.

    Parameters
    ----------
    kind : {"true-scores", "logistic", "cart-classifier"}
        "true-scores" passes the dataset's recorded logging probabilities
        through and fits nothing. "logistic" fits a multinomial logistic
        regression by gradient ascent with backtracking line search.
        "cart-classifier" fits a single Gini decision tree with Laplace
        smoothed leaf probabilities.
    max_depth : int
        Tree depth for "cart-classifier"; 0 means a single leaf.
    clip_floor : float
        Lower clip applied to every score this model reports.
    tol : float
        Gradient sup-norm stopping tolerance for "logistic".
    max_iter : int
        Iteration cap for "logistic".
    """

    KINDS = ("true-scores", "logistic", "cart-classifier")

    def __init__(self, kind="true-scores", max_depth=3, clip_floor=CLIP_FLOOR,
                 tol=1e-6, max_iter=500):
        if kind not in self.KINDS:
            raise ValueError(f"unknown propensity kind {kind!r}")
        if max_depth < 0:
            raise ValueError("max_depth must be nonnegative")
        self.kind = kind
        self.max_depth = max_depth
        self.clip_floor = clip_floor
        self.tol = tol
        self.max_iter = max_iter
        self._fitted = None
        self.n_treatments = None

    def fit(self, ds: Dataset) -> "PropensityModel":
        self.n_treatments = ds.n_treatments
        if self.kind == "true-scores":
            if ds.true_propensity is None:
                raise ValueError("dataset has no recorded logging probabilities")
            self._fitted = "observed"
            return self
        x = ds.features.astype(np.float64)
        if self.kind == "logistic":
            self._fitted = _fit_multinomial(
                np.column_stack([np.ones(ds.n_rows), x]),
                ds.treatments, ds.n_treatments, self.tol, self.max_iter,
            )
        else:
            self._fitted = _grow_classifier(
                ds.features, ds.treatments, ds.n_treatments,
                self.max_depth, np.arange(ds.n_features), None,
            )
        return self

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        """Probability of each treatment for every row; rows sum to one."""
        self._require_fitted()
        if self.kind == "true-scores":
            raise ValueError("true-scores knows only observed-arm probabilities")
        if self.kind == "logistic":
            z = np.column_stack([np.ones(len(features)), features.astype(np.float64)])
            return _softmax(z @ self._fitted)
        return _tree_apply(self._fitted, np.asarray(features), "probs")

    def observed_scores(self, ds: Dataset) -> np.ndarray:
        """Clipped estimate of ``mu(K_i, X_i)`` for every row."""
        self._require_fitted()
        if self.kind == "true-scores":
            if ds.true_propensity is None:
                raise ValueError("dataset has no recorded logging probabilities")
            scores = ds.true_propensity
        else:
            proba = self.predict_proba(ds.features)
            scores = proba[np.arange(ds.n_rows), ds.treatments]
        return np.maximum(scores, self.clip_floor)

    def _require_fitted(self):
        if self._fitted is None:
            raise RuntimeError("model is not fitted")

    def to_dict(self) -> dict:
        payload = self._fitted
        if self.kind == "logistic" and payload is not None:
            payload = np.asarray(payload).tolist()
        return {
            "kind": self.kind, "max_depth": self.max_depth,
            "clip_floor": self.clip_floor, "tol": self.tol,
            "max_iter": self.max_iter, "n_treatments": self.n_treatments,
            "fitted": payload,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PropensityModel":
        m = cls(d["kind"], d["max_depth"], d["clip_floor"], d["tol"], d["max_iter"])
        m.n_treatments = d["n_treatments"]
        m._fitted = d["fitted"]
        if m.kind == "logistic" and m._fitted is not None:
            m._fitted = np.asarray(m._fitted, dtype=np.float64)
        return m


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _fit_multinomial(z, y, n_classes, tol, max_iter):
    """Maximum-likelihood multinomial weights by backtracking gradient ascent.

    Maximizes the mean log-likelihood. The softmax parametrization is shift
    invariant, so the optimum is a manifold; any point with a small enough
    gradient serves. Raises :class:`DegenerateFitError` on non-finite
    weights.
    """
    n, d = z.shape
    w = np.zeros((d, n_classes))
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0

    def loglik(weights):
        s = z @ weights
        s = s - s.max(axis=1, keepdims=True)
        return float((np.take_along_axis(s, y[:, None], 1).sum()
                      - np.log(np.exp(s).sum(axis=1)).sum()) / n)

    ll = loglik(w)
    step = 1.0
    for _ in range(max_iter):
        grad = z.T @ (onehot - _softmax(z @ w)) / n
        if np.abs(grad).max() < tol:
            break
        step = min(step * 2.0, 1e6)
        while step > 1e-12:
            cand = w + step * grad
            cand_ll = loglik(cand)
            if cand_ll > ll + 1e-4 * step * float((grad * grad).sum()):
                w, ll = cand, cand_ll
                break
            step *= 0.5
        else:
            break
    if not np.all(np.isfinite(w)):
        raise DegenerateFitError("multinomial weights diverged")
    return w


# -- outcome models -------------------------------------------------------------


class OutcomeModel:
    """Per-treatment regression of outcome on covariates.

    One submodel is fitted for each treatment on the rows that received it;
    :meth:`matrix` stacks the per-treatment predictions into the full
    counterfactual estimate. Raises :class:`EmptyArmError` when some
    treatment has no training rows.

    Parameters
    ----------
    kind : {"linear", "lasso", "cart-regressor", "random-forest"}
        "linear" solves ridge-jittered normal equations. "lasso" runs
        coordinate descent on standardized features with an unpenalized
        intercept. "cart-regressor" grows a variance-reduction tree.
        "random-forest" averages bootstrapped trees with per-split feature
        subsampling.
    alpha : float
        L1 penalty for "lasso" under the objective
        ``||y - X b||^2 / (2 n) + alpha ||b||_1``.
    max_depth : int
        Tree depth for the tree kinds.
    n_trees : int
        Ensemble size for "random-forest".
    tol, max_iter : float, int
        Coordinate-descent stopping rule for "lasso": stop when no
        coefficient moved more than ``tol`` in a sweep.
    seed : int
        Seed for the forest's bootstrap and feature subsampling.
    """

    KINDS = ("linear", "lasso", "cart-regressor", "random-forest")

    def __init__(self, kind="linear", alpha=0.08, max_depth=3, n_trees=50,
                 tol=1e-7, max_iter=2000, seed=0):
        if kind not in self.KINDS:
            raise ValueError(f"unknown outcome kind {kind!r}")
        if max_depth < 0:
            raise ValueError("max_depth must be nonnegative")
        self.kind = kind
        self.alpha = alpha
        self.max_depth = max_depth
        self.n_trees = n_trees
        self.tol = tol
        self.max_iter = max_iter
        self.seed = seed
        self._arms = None
        self.n_treatments = None

    def fit(self, ds: Dataset) -> "OutcomeModel":
        self.n_treatments = ds.n_treatments
        self._arms = []
        for k in range(ds.n_treatments):
            mask = ds.treatments == k
            if not mask.any():
                raise EmptyArmError(f"treatment {k} has no observations")
            self._arms.append(self._fit_one(ds.features[mask], ds.outcomes[mask], k))
        return self

    def _fit_one(self, x, y, k):
        if self.kind == "linear":
            return _fit_linear(x.astype(np.float64), y)
        if self.kind == "lasso":
            return _fit_lasso(x.astype(np.float64), y, self.alpha, self.tol, self.max_iter)
        if self.kind == "cart-regressor":
            return _grow_regressor(x, y, self.max_depth, np.arange(x.shape[1]), None)
        rng = np.random.default_rng((self.seed, k))
        trees = []
        for _ in range(self.n_trees):
            rows = rng.integers(0, len(y), len(y))
            trees.append(_grow_regressor(x[rows], y[rows], self.max_depth,
                                         np.arange(x.shape[1]), rng))
        return trees

    def predict(self, features: np.ndarray, k: int) -> np.ndarray:
        """Predicted outcome under treatment ``k`` for every row."""
        if self._arms is None:
            raise RuntimeError("model is not fitted")
        sub = self._arms[k]
        x = np.asarray(features)
        if self.kind in ("linear", "lasso"):
            coef, intercept = sub
            return x.astype(np.float64) @ coef + intercept
        if self.kind == "cart-regressor":
            return _tree_apply(sub, x, "value")
        return np.mean([_tree_apply(t, x, "value") for t in sub], axis=0)

    def matrix(self, features: np.ndarray) -> np.ndarray:
        """Counterfactual prediction matrix of shape ``(n, n_treatments)``."""
        return np.column_stack(
            [self.predict(features, k) for k in range(self.n_treatments)]
        )

    def to_dict(self) -> dict:
        arms = self._arms
        if arms is not None and self.kind in ("linear", "lasso"):
            arms = [[c.tolist(), b] for c, b in arms]
        return {
            "kind": self.kind, "alpha": self.alpha, "max_depth": self.max_depth,
            "n_trees": self.n_trees, "tol": self.tol, "max_iter": self.max_iter,
            "seed": self.seed, "n_treatments": self.n_treatments, "arms": arms,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OutcomeModel":
        m = cls(d["kind"], d["alpha"], d["max_depth"], d["n_trees"], d["tol"],
                d["max_iter"], d["seed"])
        m.n_treatments = d["n_treatments"]
        m._arms = d["arms"]
        if m._arms is not None and m.kind in ("linear", "lasso"):
            m._arms = [(np.asarray(c, dtype=np.float64), float(b)) for c, b in m._arms]
        return m


def _fit_linear(x, y):
    z = np.column_stack([np.ones(len(y)), x])
    gram = z.T @ z + 1e-8 * np.eye(z.shape[1])
    beta = np.linalg.solve(gram, z.T @ y)
    if not np.all(np.isfinite(beta)):
        raise DegenerateFitError("linear fit produced non-finite coefficients")
    return beta[1:], float(beta[0])


def _fit_lasso(x, y, alpha, tol, max_iter):
    """Coordinate descent for the lasso on standardized features.

    Features are centered and scaled to unit variance before descent
    (constant features keep a zero coefficient), the intercept is never
    penalized, and the fitted coefficients are mapped back to the raw scale.
    """
    n, f = x.shape
    mean = x.mean(axis=0)
    sd = x.std(axis=0)
    live = sd > 0
    xs = np.zeros_like(x)
    xs[:, live] = (x[:, live] - mean[live]) / sd[live]
    y_mean = float(y.mean())
    r = y - y_mean
    beta = np.zeros(f)
    col_sq = (xs * xs).sum(axis=0)
    for _ in range(max_iter):
        delta = 0.0
        for j in np.flatnonzero(live):
            old = beta[j]
            rho = xs[:, j] @ r + col_sq[j] * old
            new = np.sign(rho) * max(abs(rho) / n - alpha, 0.0) / (col_sq[j] / n)
            if new != old:
                r -= (new - old) * xs[:, j]
                beta[j] = new
                delta = max(delta, abs(new - old))
        if delta <= tol:
            break
    coef = np.zeros(f)
    coef[live] = beta[live] / sd[live]
    intercept = y_mean - float(coef @ mean)
    if not np.all(np.isfinite(coef)):
        raise DegenerateFitError("lasso produced non-finite coefficients")
    return coef, intercept


# -- passthrough helpers --------------------------------------------------------


def propensity_scores(source, ds: Dataset, clip_floor: float = CLIP_FLOOR) -> np.ndarray:
    """Observed-arm logging scores from a model or a precomputed array.

    ``source`` may be a fitted :class:`PropensityModel`, a vector of
    per-row observed-arm probabilities, or a full ``(n, K)`` probability
    matrix. The result is clipped below at ``clip_floor``.
    """
    if isinstance(source, PropensityModel):
        return source.observed_scores(ds)
    arr = np.asarray(source, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[np.arange(ds.n_rows), ds.treatments]
    if arr.shape != (ds.n_rows,):
        raise ValueError("propensity array has the wrong shape")
    return np.maximum(arr, clip_floor)


def outcome_matrix(source, ds: Dataset) -> np.ndarray:
    """Counterfactual predictions from a model or a precomputed matrix."""
    if isinstance(source, OutcomeModel):
        return source.matrix(ds.features)
    arr = np.asarray(source, dtype=np.float64)
    if arr.shape != (ds.n_rows, ds.n_treatments):
        raise ValueError("outcome matrix has the wrong shape")
    return arr


def save_model(model, path: str) -> None:
    """Serialize a fitted model (either class) to a JSON file."""
    payload = model.to_dict()
    payload["model_class"] = type(model).__name__
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_model(path: str):
    """Inverse of :func:`save_model`."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    cls = {"PropensityModel": PropensityModel, "OutcomeModel": OutcomeModel}[
        payload.pop("model_class")
    ]
    return cls.from_dict(payload)
