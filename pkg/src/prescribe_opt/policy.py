"""Prescriptive trees: representation, prescription, and policy-value scoring.

A prescriptive tree is a binary tree over binary covariates whose terminal
nodes assign a treatment. Nodes are indexed in breadth-first order starting
at 1, so node ``n`` has children ``2n`` (taken when the branching feature is
0) and ``2n + 1`` (feature is 1). A node either branches on a feature,
predicts a fixed treatment, or prescribes a probability vector over
treatments; prediction is allowed above the maximum depth, which truncates
the subtree below it.

Three policy-value scores are provided. The weighting score reweights
observed outcomes by inverse logging probabilities, the regression score
averages predicted counterfactuals under the tree's assignments, and the
doubly robust score combines them, staying consistent when either nuisance
is correct.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from .data import Dataset
from .estimators import outcome_matrix, propensity_scores


class TreeStructureError(ValueError):
    """Tree nodes violate the indexing or arity rules."""


@dataclasses.dataclass(frozen=True)
class PrescriptiveTree:
    """Treatment-assignment tree over binary features.

    Parameters
    ----------
    depth : int
        Maximum number of branchings on any root-to-terminal path.
    nodes : dict
        Maps node index (1-based, breadth-first) to an action tuple:
        ``("branch", feature)``, ``("predict", treatment)``, or
        ``("stochastic", probabilities)``.
    provenance : dict, optional
        Free-form metadata about how the tree was obtained.
    """

    depth: int
    nodes: dict
    provenance: dict = dataclasses.field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.depth < 0:
            raise TreeStructureError("depth must be nonnegative")
        if 1 not in self.nodes:
            raise TreeStructureError("node 1 (the root) is missing")
        for n, action in self.nodes.items():
            kind = action[0]
            if kind == "branch":
                if n >= 2 ** self.depth:
                    raise TreeStructureError(f"node {n} branches below depth {self.depth}")
                for child in (2 * n, 2 * n + 1):
                    if child not in self.nodes:
                        raise TreeStructureError(f"branch node {n} lacks child {child}")
            elif kind in ("predict", "stochastic"):
                for child in (2 * n, 2 * n + 1):
                    if child in self.nodes:
                        raise TreeStructureError(f"terminal node {n} has child {child}")
                if kind == "stochastic":
                    probs = np.asarray(action[1], dtype=np.float64)
                    if probs.ndim != 1 or abs(probs.sum() - 1.0) > 1e-9 or probs.min() < -1e-12:
                        raise TreeStructureError(f"node {n} has an invalid probability vector")
            else:
                raise TreeStructureError(f"node {n} has unknown action {kind!r}")
            if n > 1 and (n // 2) not in self.nodes:
                raise TreeStructureError(f"node {n} is unreachable")

    @property
    def is_stochastic(self) -> bool:
        return any(a[0] == "stochastic" for a in self.nodes.values())

    def feature_set(self) -> set:
        return {a[1] for a in self.nodes.values() if a[0] == "branch"}

    def prescribe(self, x: np.ndarray):
        """Treatment for one covariate row (or its probability vector)."""
        n = 1
        while True:
            kind, value = self.nodes[n][0], self.nodes[n][1]
            if kind == "branch":
                n = 2 * n + int(x[value])
            elif kind == "predict":
                return int(value)
            else:
                return np.asarray(value, dtype=np.float64)

    def assignment_matrix(self, features: np.ndarray, n_treatments: int) -> np.ndarray:
        """Per-row treatment probabilities of shape ``(n, n_treatments)``.

        Deterministic prescriptions appear as one-hot rows, so downstream
        scoring handles both tree types uniformly.
        """
        features = np.asarray(features)
        n = len(features)
        out = np.zeros((n, n_treatments))
        idx = np.ones(n, dtype=np.int64)
        live = np.ones(n, dtype=bool)
        while live.any():
            for node in np.unique(idx[live]):
                here = live & (idx == node)
                kind, value = self.nodes[node][0], self.nodes[node][1]
                if kind == "branch":
                    idx[here] = 2 * node + features[here, value]
                elif kind == "predict":
                    out[here, int(value)] = 1.0
                    live[here] = False
                else:
                    out[here] = np.asarray(value, dtype=np.float64)
                    live[here] = False
        return out

    def prescribe_batch(self, features: np.ndarray, n_treatments: int) -> np.ndarray:
        """Deterministic prescriptions for every row; errors if stochastic."""
        if self.is_stochastic:
            raise TreeStructureError("tree is stochastic; use assignment_matrix")
        return np.argmax(self.assignment_matrix(features, n_treatments), axis=1)

    def to_dict(self) -> dict:
        nodes = {}
        for n, action in self.nodes.items():
            if action[0] == "stochastic":
                nodes[str(n)] = ["stochastic", [float(p) for p in np.asarray(action[1])]]
            else:
                nodes[str(n)] = [action[0], int(action[1])]
        return {"depth": self.depth, "nodes": nodes, "provenance": self.provenance}

    @classmethod
    def from_dict(cls, d: dict) -> "PrescriptiveTree":
        nodes = {}
        for n, (kind, value) in d["nodes"].items():
            nodes[int(n)] = (kind, tuple(value) if kind == "stochastic" else int(value))
        return cls(depth=d["depth"], nodes=nodes, provenance=d.get("provenance", {}))


def save_tree(tree: PrescriptiveTree, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(tree.to_dict(), fh, indent=2)


def load_tree(path: str) -> PrescriptiveTree:
    with open(path, encoding="utf-8") as fh:
        return PrescriptiveTree.from_dict(json.load(fh))


# -- policy-value estimators ----------------------------------------------------


def q_ipw(ds: Dataset, tree: PrescriptiveTree, propensity) -> float:
    """Inverse-propensity-weighted policy value.

    Averages ``Y_i / mu_i`` over rows whose logged treatment matches the
    tree's prescription (matched in expectation for stochastic trees).
    ``propensity`` may be a fitted model, a score vector, or a probability
    matrix.
    """
    mu = propensity_scores(propensity, ds)
    pi = tree.assignment_matrix(ds.features, ds.n_treatments)
    match = pi[np.arange(ds.n_rows), ds.treatments]
    return float(np.mean(match * ds.outcomes / mu))


def q_dm(ds: Dataset, tree: PrescriptiveTree, outcome) -> float:
    """Regression-based policy value: mean predicted outcome under the tree."""
    nu = outcome_matrix(outcome, ds)
    pi = tree.assignment_matrix(ds.features, ds.n_treatments)
    return float(np.mean((pi * nu).sum(axis=1)))


def q_dr(ds: Dataset, tree: PrescriptiveTree, propensity, outcome) -> float:
    """Doubly robust policy value.

    The regression score plus an inverse-propensity correction on the
    observed arm's residual; consistent when either nuisance is consistent.
    """
    mu = propensity_scores(propensity, ds)
    nu = outcome_matrix(outcome, ds)
    pi = tree.assignment_matrix(ds.features, ds.n_treatments)
    match = pi[np.arange(ds.n_rows), ds.treatments]
    resid = ds.outcomes - nu[np.arange(ds.n_rows), ds.treatments]
    return q_dm(ds, tree, nu) + float(np.mean(match * resid / mu))


# -- evaluation against known counterfactuals -----------------------------------


@dataclasses.dataclass(frozen=True)
class EvalReport:
    """Test-set evaluation of a tree against known potential outcomes.

    ``true_value`` is the mean realized counterfactual under the tree's
    assignments, ``oosp`` the fraction of rows prescribed an optimal
    treatment (expected fraction for stochastic trees), and ``regret`` the
    total shortfall against the row-wise best treatment, summed over the
    test set.
    """

    n_rows: int
    true_value: float
    oosp: float
    regret: float
    treatment_shares: tuple
    group_oosp: dict
    provenance: dict

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def csv_row(self) -> list:
        return [self.n_rows, self.true_value, self.oosp, self.regret]


def evaluate(tree: PrescriptiveTree, ds: Dataset) -> EvalReport:
    """Score a tree on a dataset that carries full potential outcomes."""
    if ds.counterfactuals is None:
        raise ValueError("evaluation requires counterfactual columns")
    pi = tree.assignment_matrix(ds.features, ds.n_treatments)
    cf = ds.counterfactuals
    value_per_row = (pi * cf).sum(axis=1)
    best = cf.max(axis=1)
    is_best = cf >= best[:, None] - 1e-12
    oosp_per_row = (pi * is_best).sum(axis=1)
    shares = tuple(float(s) for s in pi.mean(axis=0))
    group = {}
    if ds.protected is not None:
        for g in np.unique(ds.protected):
            mask = ds.protected == g
            group[str(g)] = float(oosp_per_row[mask].mean())
    return EvalReport(
        n_rows=ds.n_rows,
        true_value=float(value_per_row.mean()),
        oosp=float(oosp_per_row.mean()),
        regret=float((best - value_per_row).sum()),
        treatment_shares=shares,
        group_oosp=group,
        provenance=dict(tree.provenance),
    )
