"""Mixed-integer formulations of the optimal prescriptive tree problem.

The counterfactual objectives are linearized over a perfect binary tree by
routing observations through a flow network: a source feeds the root, branch
nodes forward each observation left or right according to the chosen
branching feature, and flow exits through per-node sinks whose capacity is
controlled by the node's treatment assignment. Solving the resulting MIO
with the bundled branch and bound (or any LP-file-compatible solver)
recovers a provably optimal tree for the chosen objective, in contrast to
greedy tree induction.

Observations that agree on every relevant attribute are interchangeable in
these models, so rows are aggregated into weighted groups before variables
are created; model size then scales with the number of distinct covariate
patterns rather than the number of rows.

Assignment variables are declared continuous wherever their integrality is
implied at optimality for integral branching decisions. A post-solve audit
verifies that implication on the returned solution and, when it ever fails,
the solver is rerun with those variables forced binary.
"""

from __future__ import annotations

import dataclasses
from typing import Mapping, Sequence

import numpy as np

from . import milp
from .data import Dataset
from .estimators import outcome_matrix, propensity_scores
from .milp import BINARY, CONTINUOUS, MilpModel
from .policy import PrescriptiveTree


class ExtractionError(ValueError):
    """A solver assignment does not encode a valid tree."""


class ExtensionError(ValueError):
    """An extension constraint cannot attach to this model."""


class InfeasibleModelError(RuntimeError):
    """The constraint system admits no tree at all."""


@dataclasses.dataclass(frozen=True)
class FlowGraph:
    """Node indexing of a perfect binary tree of a given depth.

    Nodes are numbered 1..2^(depth+1)-1 in breadth-first order; the first
    2^depth - 1 may branch and the rest are terminal. Feature value 0 routes
    to child ``2n``, value 1 to ``2n + 1``.
    """

    depth: int

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError("depth must be nonnegative")

    @property
    def branch_nodes(self) -> tuple:
        return tuple(range(1, 2 ** self.depth))

    @property
    def terminal_nodes(self) -> tuple:
        return tuple(range(2 ** self.depth, 2 ** (self.depth + 1)))

    @property
    def all_nodes(self) -> tuple:
        return self.branch_nodes + self.terminal_nodes

    def ancestors(self, n: int) -> tuple:
        out = []
        while n > 1:
            n //= 2
            out.append(n)
        return tuple(reversed(out))

    def goes_right(self, n: int, m: int) -> bool:
        """Whether the path from the root to ``n`` turns right at ancestor ``m``."""
        depth_n = n.bit_length() - 1
        depth_m = m.bit_length() - 1
        if not (m == n >> (depth_n - depth_m)) or m == n:
            raise ValueError(f"{m} is not a proper ancestor of {n}")
        return bool((n >> (depth_n - depth_m - 1)) & 1)


@dataclasses.dataclass(frozen=True)
class FormulationConfig:
    """Knobs shared by the model builders."""

    depth: int = 2

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError("depth must be nonnegative")


# -- row aggregation ------------------------------------------------------------


def _group_rows(ds: Dataset, extra_fn) -> dict:
    """Collect row indices by (feature pattern, extra signature)."""
    groups: dict = {}
    feats = ds.features
    for i in range(ds.n_rows):
        key = (feats[i].tobytes(), extra_fn(i))
        groups.setdefault(key, []).append(i)
    return groups


def _stack_groups(ds: Dataset, groups: dict) -> dict:
    idx = [np.asarray(rows) for rows in groups.values()]
    first = np.array([rows[0] for rows in idx])
    out = {
        "n_groups": len(idx),
        "rows": idx,
        "weight": np.array([len(rows) for rows in idx], dtype=np.float64),
        "features": ds.features[first],
        "treatment": ds.treatments[first],
    }
    if ds.protected is not None:
        out["protected"] = ds.protected[first]
    if ds.legitimate is not None:
        out["legitimate"] = ds.legitimate[first]
    return out


def _social_signature(ds: Dataset, i: int) -> tuple:
    sig = ()
    if ds.protected is not None:
        sig += (ds.protected[i],)
    if ds.legitimate is not None:
        sig += (ds.legitimate[i],)
    return sig


# -- shared structural block -----------------------------------------------------


def _structure_block(model: MilpModel, graph: FlowGraph, n_features: int,
                     n_treatments: int, early_predict: bool) -> dict:
    """Branching, prediction, and assignment variables with their coupling.

    Every node must do exactly one of: branch, predict here, or sit below an
    ancestor that already predicted; terminal nodes cannot branch. Treatment
    mass at a node is available exactly when the node predicts.
    """
    b = {}
    for n in graph.branch_nodes:
        for f in range(n_features):
            b[n, f] = model.add_var(f"b[{n},{f}]", 0.0, 1.0, BINARY)
    p = {}
    w = {}
    for n in graph.all_nodes:
        p[n] = model.add_var(f"p[{n}]", 0.0, 1.0, BINARY)
        for k in range(n_treatments):
            w[n, k] = model.add_var(f"w[{n},{k}]", 0.0, 1.0, CONTINUOUS)
    for n in graph.branch_nodes:
        coeffs = [(b[n, f], 1.0) for f in range(n_features)]
        coeffs.append((p[n], 1.0))
        coeffs.extend((p[m], 1.0) for m in graph.ancestors(n))
        model.add_constr(coeffs, "=", 1.0, f"role[{n}]")
    for n in graph.terminal_nodes:
        coeffs = [(p[n], 1.0)]
        coeffs.extend((p[m], 1.0) for m in graph.ancestors(n))
        model.add_constr(coeffs, "=", 1.0, f"role[{n}]")
    for n in graph.all_nodes:
        coeffs = [(w[n, k], 1.0) for k in range(n_treatments)]
        coeffs.append((p[n], -1.0))
        model.add_constr(coeffs, "=", 0.0, f"mass[{n}]")
    if not early_predict:
        for n in graph.branch_nodes:
            model.add_constr([(p[n], 1.0)], "=", 0.0, f"full[{n}]")
    return {"b": b, "p": p, "w": w}


def _flow_block(model: MilpModel, graph: FlowGraph, struct: dict, groups: dict,
                sinks: str, n_treatments: int, source_exactly_one: bool) -> dict:
    """Per-group routing variables and their conservation and gating rows.

    ``sinks`` is "observed" (one sink per node, gated by the assignment mass
    of the group's logged treatment) or "all" (one sink per node and
    treatment). The source arc carries at most one unit, or exactly one when
    the objective needs every group placed.
    """
    b, w = struct["b"], struct["w"]
    G = groups["n_groups"]
    feats = groups["features"]
    z_src, z_left, z_right, z_sink = {}, {}, {}, {}
    for g in range(G):
        z_src[g] = model.add_var(f"z[{g},src]", 0.0, 1.0, CONTINUOUS)
        sense = "=" if source_exactly_one else "<="
        model.add_constr([(z_src[g], 1.0)], sense, 1.0, f"source[{g}]")
        for n in graph.branch_nodes:
            z_left[g, n] = model.add_var(f"z[{g},{n},L]", 0.0, 1.0, CONTINUOUS)
            z_right[g, n] = model.add_var(f"z[{g},{n},R]", 0.0, 1.0, CONTINUOUS)
            # the left arc is open only when the branching feature reads 0
            open_left = [(b[n, f], 1.0) for f in range(feats.shape[1]) if feats[g, f] == 0]
            open_right = [(b[n, f], 1.0) for f in range(feats.shape[1]) if feats[g, f] == 1]
            model.add_constr([(z_left[g, n], 1.0)] + [(v, -c) for v, c in open_left],
                             "<=", 0.0, f"gateL[{g},{n}]")
            model.add_constr([(z_right[g, n], 1.0)] + [(v, -c) for v, c in open_right],
                             "<=", 0.0, f"gateR[{g},{n}]")
        for n in graph.all_nodes:
            if sinks == "observed":
                k = int(groups["treatment"][g])
                z_sink[g, n] = model.add_var(f"z[{g},{n},t]", 0.0, 1.0, CONTINUOUS)
                model.add_constr([(z_sink[g, n], 1.0), (w[n, k], -1.0)],
                                 "<=", 0.0, f"gateT[{g},{n}]")
            else:
                for k in range(n_treatments):
                    z_sink[g, n, k] = model.add_var(f"z[{g},{n},t{k}]", 0.0, 1.0, CONTINUOUS)
                    model.add_constr([(z_sink[g, n, k], 1.0), (w[n, k], -1.0)],
                                     "<=", 0.0, f"gateT[{g},{n},{k}]")
        for n in graph.all_nodes:
            inflow = z_src[g] if n == 1 else (
                z_left[g, n // 2] if n % 2 == 0 else z_right[g, n // 2]
            )
            coeffs = [(inflow, 1.0)]
            if n in graph.branch_nodes:
                coeffs.append((z_left[g, n], -1.0))
                coeffs.append((z_right[g, n], -1.0))
            if sinks == "observed":
                coeffs.append((z_sink[g, n], -1.0))
            else:
                coeffs.extend((z_sink[g, n, k], -1.0) for k in range(n_treatments))
            model.add_constr(coeffs, "=", 0.0, f"flow[{g},{n}]")
    return {"z_src": z_src, "z_left": z_left, "z_right": z_right, "z_sink": z_sink}


# -- model builders --------------------------------------------------------------


def build_ipw_model(ds: Dataset, propensity, config: FormulationConfig):
    """Weighting-objective tree model.

    Each group's source arc carries the summed ``Y_i / mu_i`` of its rows as
    objective coefficient, and flow can only exit through nodes assigning
    the group's logged treatment, so the optimum equals the dataset-summed
    weighting score of the optimal tree. The source inequality lets rows
    with negative weighted outcomes stay unrouted, which censors negative
    contributions; with nonnegative outcomes the correspondence is exact.

    Returns
    -------
    (MilpModel, dict)
        The model and a metadata map used by extraction, auditing, and the
        extension operators.
    """
    mu = propensity_scores(propensity, ds)
    contrib = ds.outcomes / mu

    def extra(i):
        c = contrib[i]
        return (int(ds.treatments[i]), 1 if c > 0 else (-1 if c < 0 else 0),
                _social_signature(ds, i))

    raw = _group_rows(ds, extra)
    groups = _stack_groups(ds, raw)
    groups["coef"] = np.array([contrib[rows].sum() for rows in groups["rows"]])

    graph = FlowGraph(config.depth)
    model = MilpModel("ipw-tree")
    struct = _structure_block(model, graph, ds.n_features, ds.n_treatments, True)
    flow = _flow_block(model, graph, struct, groups, "observed", ds.n_treatments, False)
    model.set_objective([(flow["z_src"][g], float(groups["coef"][g]))
                         for g in range(groups["n_groups"])])
    meta = {
        "method": "ipw", "graph": graph, "n_rows": ds.n_rows,
        "n_treatments": ds.n_treatments, "n_features": ds.n_features,
        "feature_names": ds.feature_names, "groups": groups,
        "objective_constant": 0.0, "randomized": False, "sinks": "observed",
        **struct, **flow,
        "branch_set": sorted(struct["b"].values()) + sorted(struct["p"].values()),
        "assign_vars": sorted(struct["w"].values()),
    }
    return model, meta


def _build_value_matrix_model(ds, value, config, method):
    def extra(i):
        return (int(ds.treatments[i]), value[i].tobytes(), _social_signature(ds, i))

    raw = _group_rows(ds, extra)
    groups = _stack_groups(ds, raw)
    first = np.array([rows[0] for rows in groups["rows"]])
    groups["value"] = value[first]

    graph = FlowGraph(config.depth)
    model = MilpModel(f"{method}-tree")
    struct = _structure_block(model, graph, ds.n_features, ds.n_treatments, True)
    flow = _flow_block(model, graph, struct, groups, "all", ds.n_treatments, True)
    terms = []
    for g in range(groups["n_groups"]):
        ng = groups["weight"][g]
        for n in graph.all_nodes:
            for k in range(ds.n_treatments):
                terms.append((flow["z_sink"][g, n, k], float(ng * groups["value"][g, k])))
    model.set_objective(terms)
    meta = {
        "method": method, "graph": graph, "n_rows": ds.n_rows,
        "n_treatments": ds.n_treatments, "n_features": ds.n_features,
        "feature_names": ds.feature_names, "groups": groups,
        "objective_constant": 0.0, "randomized": False, "sinks": "all",
        **struct, **flow,
        "branch_set": sorted(struct["b"].values()) + sorted(struct["p"].values()),
        "assign_vars": sorted(struct["w"].values()),
    }
    return model, meta


def build_dm_model(ds: Dataset, outcome, config: FormulationConfig):
    """Regression-objective tree model.

    Every group must route to exactly one (node, treatment) sink; a sink
    pays the group's predicted outcome under that treatment. Negative
    predictions are handled correctly because the source arc is an equality:
    the group cannot opt out, it can only choose where to land.
    """
    nu = outcome_matrix(outcome, ds)
    return _build_value_matrix_model(ds, nu, config, "dm")


def build_dr_model(ds: Dataset, propensity, outcome, config: FormulationConfig):
    """Doubly robust objective tree model.

    The sink payoff adds the inverse-propensity-weighted residual of the
    observed treatment to the regression payoff, so the model optimizes the
    exact doubly robust score of the induced tree.
    """
    mu = propensity_scores(propensity, ds)
    nu = outcome_matrix(outcome, ds)
    value = nu.copy()
    rows = np.arange(ds.n_rows)
    value[rows, ds.treatments] += (ds.outcomes - nu[rows, ds.treatments]) / mu
    return _build_value_matrix_model(ds, value, config, "dr")


def build_kpt_model(ds: Dataset, config: FormulationConfig):
    """Tree-restricted baseline estimator as a MIO.

    Branch nodes always split and each leaf picks one treatment; the leaf's
    payoff is its size times the sample mean of the shifted outcome over the
    leaf's rows logged with the chosen treatment. Membership indicators are
    linked to the branching variables, and per-leaf mean variables are tied
    to the data through big-M sum constraints that activate for the chosen
    treatment. A leaf whose chosen treatment was never logged inside it
    pays the (shifted) floor of zero.
    """
    if config.depth < 1:
        raise ValueError("the baseline model needs depth at least 1")
    shift = float(ds.outcomes.min())
    shifted = ds.outcomes - shift
    y_max = float(shifted.max())

    raw = _group_rows(ds, lambda i: (int(ds.treatments[i]),))
    groups = _stack_groups(ds, raw)
    groups["y_mean"] = np.array([shifted[rows].mean() for rows in groups["rows"]])
    G = groups["n_groups"]
    counts = np.zeros(ds.n_treatments)
    for g in range(G):
        counts[groups["treatment"][g]] += groups["weight"][g]
    big_m = y_max * float(counts.max()) if G else 1.0

    graph = FlowGraph(config.depth)
    model = MilpModel("baseline-tree")
    b = {}
    for n in graph.branch_nodes:
        for f in range(ds.n_features):
            b[n, f] = model.add_var(f"b[{n},{f}]", 0.0, 1.0, BINARY)
        model.add_constr([(b[n, f], 1.0) for f in range(ds.n_features)], "=", 1.0,
                         f"pick[{n}]")
    w = {}
    for n in graph.terminal_nodes:
        for k in range(ds.n_treatments):
            w[n, k] = model.add_var(f"w[{n},{k}]", 0.0, 1.0, BINARY)
        model.add_constr([(w[n, k], 1.0) for k in range(ds.n_treatments)], "=", 1.0,
                         f"assign[{n}]")
    chi = {}
    for g in range(G):
        for m in graph.branch_nodes:
            chi[g, m] = model.add_var(f"chi[{g},{m}]", 0.0, 1.0, BINARY)
            lefts = [(b[m, f], 1.0) for f in range(ds.n_features)
                     if groups["features"][g, f] == 0]
            model.add_constr([(chi[g, m], 1.0)] + [(v, -c) for v, c in lefts],
                             "=", 0.0, f"dir[{g},{m}]")
    lam = {}
    for g in range(G):
        for n in graph.terminal_nodes:
            lam[g, n] = model.add_var(f"lam[{g},{n}]", 0.0, 1.0, BINARY)
            path = graph.ancestors(n)
            lower = [(lam[g, n], 1.0)]
            rhs = 1.0
            for m in path:
                if graph.goes_right(n, m):
                    # membership requires not-left at m
                    model.add_constr([(lam[g, n], 1.0), (chi[g, m], 1.0)],
                                     "<=", 1.0, f"memR[{g},{n},{m}]")
                    lower.append((chi[g, m], 1.0))
                else:
                    model.add_constr([(lam[g, n], 1.0), (chi[g, m], -1.0)],
                                     "<=", 0.0, f"memL[{g},{n},{m}]")
                    lower.append((chi[g, m], -1.0))
                    rhs -= 1.0
            model.add_constr(lower, ">=", rhs, f"memAll[{g},{n}]")
    rho, eta = {}, {}
    for n in graph.terminal_nodes:
        rho[n] = model.add_var(f"rho[{n}]", 0.0, y_max if y_max > 0 else 0.0, CONTINUOUS)
        for g in range(G):
            eta[g, n] = model.add_var(f"eta[{g},{n}]", 0.0, y_max, CONTINUOUS)
            model.add_constr([(eta[g, n], 1.0), (lam[g, n], -y_max)], "<=", 0.0,
                             f"etaCap[{g},{n}]")
            model.add_constr([(eta[g, n], 1.0), (rho[n], -1.0)], "<=", 0.0,
                             f"etaRho[{g},{n}]")
            model.add_constr([(eta[g, n], 1.0), (rho[n], -1.0), (lam[g, n], -y_max)],
                             ">=", -y_max, f"etaPin[{g},{n}]")
    for n in graph.terminal_nodes:
        for k in range(ds.n_treatments):
            members = [g for g in range(G) if groups["treatment"][g] == k]
            coeffs = []
            for g in members:
                ng = groups["weight"][g]
                coeffs.append((eta[g, n], ng))
                coeffs.append((lam[g, n], -ng * float(groups["y_mean"][g])))
            model.add_constr(coeffs + [(w[n, k], big_m)], "<=", big_m,
                             f"tieUp[{n},{k}]")
            model.add_constr(coeffs + [(w[n, k], -big_m)], ">=", -big_m,
                             f"tieDn[{n},{k}]")
            # an empty chosen arm forces the leaf estimate to the floor
            presence = [(lam[g, n], y_max * groups["weight"][g]) for g in members]
            model.add_constr([(rho[n], 1.0), (w[n, k], y_max)] + [(v, -c) for v, c in presence],
                             "<=", y_max, f"present[{n},{k}]")
    model.set_objective([(eta[g, n], float(groups["weight"][g]))
                         for g in range(G) for n in graph.terminal_nodes])
    meta = {
        "method": "kpt", "graph": graph, "n_rows": ds.n_rows,
        "n_treatments": ds.n_treatments, "n_features": ds.n_features,
        "feature_names": ds.feature_names, "groups": groups,
        "objective_constant": shift * ds.n_rows, "randomized": False,
        "sinks": None, "b": b, "p": {}, "w": w,
        "branch_set": sorted(b.values()) + sorted(w.values()),
        "assign_vars": sorted(w.values()),
    }
    return model, meta


# -- extension constraints --------------------------------------------------------


def _require_sinks(meta, op):
    if meta.get("sinks") != "all":
        raise ExtensionError(f"{op} attaches only to regression or doubly robust models")


def add_branching_limit(model: MilpModel, meta: dict, max_branches: int):
    """Cap the number of branching decisions across the whole tree.

    Zero forces a single prediction at the root; each unit allows one more
    split. Tightening interpretability this way never raises the optimum.
    """
    if max_branches < 0:
        raise ValueError("max_branches must be nonnegative")
    out = model.copy()
    coeffs = [(idx, 1.0) for idx in meta["b"].values()]
    if coeffs:
        out.add_constr(coeffs, "<=", float(max_branches), "branch_budget")
    new_meta = dict(meta)
    new_meta["extensions"] = meta.get("extensions", ()) + (("branching_limit", max_branches),)
    return out, new_meta


def add_treatment_budgets(model: MilpModel, meta: dict, caps: Mapping[int, float]):
    """Cap the population share each treatment may be prescribed."""
    _require_sinks(meta, "treatment budgets")
    out = model.copy()
    groups = meta["groups"]
    graph = meta["graph"]
    for k, cap in caps.items():
        if not 0.0 <= cap <= 1.0:
            raise ValueError(f"budget for treatment {k} must be in [0, 1]")
        coeffs = [
            (meta["z_sink"][g, n, k], float(groups["weight"][g]))
            for g in range(groups["n_groups"]) for n in graph.all_nodes
        ]
        out.add_constr(coeffs, "<=", cap * meta["n_rows"], f"budget[{k}]")
    new_meta = dict(meta)
    new_meta["extensions"] = meta.get("extensions", ()) + (("budgets", dict(caps)),)
    return out, new_meta


def _group_rate_terms(meta, members, k):
    graph = meta["graph"]
    weight = meta["groups"]["weight"]
    total = float(weight[members].sum())
    terms = [
        (meta["z_sink"][g, n, k], float(weight[g]) / total)
        for g in members for n in graph.all_nodes
    ]
    return terms, total


def add_assignment_parity(model: MilpModel, meta: dict, delta: float):
    """Bound the gap in treatment rates between protected groups.

    For every treatment and every pair of protected-attribute values, the
    shares of each group prescribed that treatment may differ by at most
    ``delta``.
    """
    _require_sinks(meta, "assignment parity")
    if "protected" not in meta["groups"]:
        raise ExtensionError("dataset has no protected attribute")
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    out = model.copy()
    prot = meta["groups"]["protected"]
    values = sorted(set(prot.tolist()), key=str)
    for k in range(meta["n_treatments"]):
        for a_pos, a in enumerate(values):
            for bval in values[a_pos + 1:]:
                t_a, _ = _group_rate_terms(meta, np.flatnonzero(prot == a), k)
                t_b, _ = _group_rate_terms(meta, np.flatnonzero(prot == bval), k)
                both = t_a + [(v, -c) for v, c in t_b]
                out.add_constr(both, "<=", delta, f"parity+[{k},{a},{bval}]")
                out.add_constr(both, ">=", -delta, f"parity-[{k},{a},{bval}]")
    new_meta = dict(meta)
    new_meta["extensions"] = meta.get("extensions", ()) + (("assignment_parity", delta),)
    return out, new_meta


def add_conditional_parity(model: MilpModel, meta: dict, delta: float):
    """Assignment parity within every level of the legitimate attribute.

    Strata where some protected group has no members are skipped, since a
    rate is undefined there.
    """
    _require_sinks(meta, "conditional parity")
    groups = meta["groups"]
    if "protected" not in groups or "legitimate" not in groups:
        raise ExtensionError("dataset needs protected and legitimate attributes")
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    out = model.copy()
    prot, legit = groups["protected"], groups["legitimate"]
    for a in sorted(set(legit.tolist()), key=str):
        stratum = legit == a
        values = sorted(set(prot[stratum].tolist()), key=str)
        for k in range(meta["n_treatments"]):
            for v_pos, v in enumerate(values):
                for u in values[v_pos + 1:]:
                    mem_v = np.flatnonzero(stratum & (prot == v))
                    mem_u = np.flatnonzero(stratum & (prot == u))
                    if not len(mem_v) or not len(mem_u):
                        continue
                    t_v, _ = _group_rate_terms(meta, mem_v, k)
                    t_u, _ = _group_rate_terms(meta, mem_u, k)
                    both = t_v + [(var, -c) for var, c in t_u]
                    out.add_constr(both, "<=", delta, f"cpar+[{k},{v},{u},{a}]")
                    out.add_constr(both, ">=", -delta, f"cpar-[{k},{v},{u},{a}]")
    new_meta = dict(meta)
    new_meta["extensions"] = meta.get("extensions", ()) + (("conditional_parity", delta),)
    return out, new_meta


def add_outcome_parity(model: MilpModel, meta: dict, delta: float,
                       convention: str = "sum"):
    """Bound the gap in model-attributed outcome value between groups.

    ``convention`` selects the units: "sum" compares each group's total
    attributed value, "mean" compares per-member averages. The two differ
    whenever protected groups have unequal sizes.
    """
    _require_sinks(meta, "outcome parity")
    if "protected" not in meta["groups"]:
        raise ExtensionError("dataset has no protected attribute")
    if convention not in ("sum", "mean"):
        raise ValueError(f"unknown convention {convention!r}")
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    out = model.copy()
    groups = meta["groups"]
    graph = meta["graph"]
    prot = groups["protected"]
    values = sorted(set(prot.tolist()), key=str)

    def value_terms(members):
        scale = float(groups["weight"][members].sum()) if convention == "mean" else 1.0
        return [
            (meta["z_sink"][g, n, k],
             float(groups["weight"][g] * groups["value"][g, k]) / scale)
            for g in members for n in graph.all_nodes
            for k in range(meta["n_treatments"])
        ]

    for a_pos, a in enumerate(values):
        for bval in values[a_pos + 1:]:
            t_a = value_terms(np.flatnonzero(prot == a))
            t_b = value_terms(np.flatnonzero(prot == bval))
            both = t_a + [(v, -c) for v, c in t_b]
            out.add_constr(both, "<=", delta, f"opar+[{a},{bval}]")
            out.add_constr(both, ">=", -delta, f"opar-[{a},{bval}]")
    new_meta = dict(meta)
    new_meta["extensions"] = meta.get("extensions", ()) + (
        ("outcome_parity", delta, convention),
    )
    return out, new_meta


def relax_assignments(model: MilpModel, meta: dict):
    """Allow stochastic treatment assignment at the leaves.

    Assignment variables are already continuous in the base models; this
    marks the model so the solve wrapper accepts fractional assignments
    instead of forcing them integral, and extraction then emits probability
    vectors at terminal nodes.
    """
    new_meta = dict(meta)
    new_meta["randomized"] = True
    new_meta["extensions"] = meta.get("extensions", ()) + (("randomized",),)
    return model.copy(), new_meta


# -- extraction and solving -------------------------------------------------------


def _read_binary(x, idx, what, tol=1e-6):
    v = float(x[idx])
    if abs(v) > tol and abs(v - 1.0) > tol:
        raise ExtractionError(f"{what} is fractional ({v:.6f})")
    return int(round(v))


def extract_policy(meta: dict, x: np.ndarray) -> PrescriptiveTree:
    """Decode a solver assignment into a prescriptive tree.

    Only nodes actually reachable from the root are inspected, since the
    models leave the decision variables of dead subtrees unconstrained.
    Deterministic assignments become predictions (ties in relaxed
    assignments go to the lowest treatment); under a randomized model a
    fractional assignment row becomes a stochastic node.
    """
    graph: FlowGraph = meta["graph"]
    n_treatments = meta["n_treatments"]
    nodes: dict = {}

    def assignment(n):
        row = np.array([float(x[meta["w"][n, k]]) for k in range(n_treatments)])
        if meta["randomized"] and np.abs(row - np.round(row)).max() > 1e-6:
            total = row.sum()
            if total <= 0:
                raise ExtractionError(f"node {n} assignment mass vanished")
            return ("stochastic", tuple(row / total))
        ints = [_read_binary(x, meta["w"][n, k], f"w[{n},{k}]") for k in range(n_treatments)]
        if sum(ints) != 1:
            raise ExtractionError(f"node {n} assigns {sum(ints)} treatments")
        return ("predict", int(np.argmax(ints)))

    def walk(n):
        if n in graph.terminal_nodes:
            nodes[n] = assignment(n)
            return
        predicts = _read_binary(x, meta["p"][n], f"p[{n}]") if meta["p"] else 0
        if predicts:
            nodes[n] = assignment(n)
            return
        picks = [f for f in range(meta["n_features"])
                 if _read_binary(x, meta["b"][n, f], f"b[{n},{f}]")]
        if len(picks) != 1:
            raise ExtractionError(f"node {n} branches on {len(picks)} features")
        nodes[n] = ("branch", picks[0])
        walk(2 * n)
        walk(2 * n + 1)

    walk(1)
    return PrescriptiveTree(depth=graph.depth, nodes=nodes,
                            provenance={"solver": "mio", "method": meta["method"]})


def audit_relaxation(meta: dict, x: np.ndarray, tol: float = 1e-6) -> list:
    """Check that relaxed variables landed integral where the tree needs them.

    Returns human-readable violation notes; empty means the implied
    integrality held. Routing variables are checked against {0, 1} and
    reachable assignment rows against one-hot, which together guarantee a
    deterministic tree is encoded.
    """
    problems = []
    try:
        tree = extract_policy(meta, x)
    except ExtractionError as exc:
        return [str(exc)]
    if meta["randomized"]:
        return []
    if tree.is_stochastic:
        problems.append("stochastic assignment in a deterministic model")
    for name in ("z_src", "z_left", "z_right", "z_sink"):
        for key, idx in meta.get(name, {}).items():
            v = float(x[idx])
            if min(abs(v), abs(v - 1.0)) > tol:
                problems.append(f"routing variable {name}{key} fractional ({v:.6f})")
    return problems


def solve_model(model: MilpModel, meta: dict, time_limit_s: float = 3600.0,
                gap_tol: float = 1e-6, node_limit=None):
    """Optimize a tree model and decode the result.

    Runs branch and bound over the branching decisions, audits the implied
    integrality of the relaxed assignment and routing variables, and
    reruns with assignments forced binary in the rare case the audit
    fails. Randomized models skip the audit.

    Returns
    -------
    (PrescriptiveTree, SolveReport, ndarray)
    """
    report, x = milp.branch_and_bound(
        model, time_limit_s=time_limit_s, gap_tol=gap_tol,
        branch_set=meta["branch_set"], node_limit=node_limit,
    )
    if x is None:
        if report.status == "infeasible":
            raise InfeasibleModelError("the constraints admit no tree")
        raise ExtractionError(f"no incumbent found (status {report.status})")
    problems = [] if meta["randomized"] else audit_relaxation(meta, x)
    if problems:
        hardened = model.copy()
        for idx in meta["assign_vars"]:
            hardened.set_integrality(idx, BINARY)
        report, x = milp.branch_and_bound(
            hardened, time_limit_s=time_limit_s, gap_tol=gap_tol,
            branch_set=meta["branch_set"] + list(meta["assign_vars"]),
            node_limit=node_limit,
        )
        if x is None:
            raise ExtractionError(f"no incumbent after hardening (status {report.status})")
    tree = extract_policy(meta, x)
    return tree, report, x


def objective_estimate(meta: dict, report) -> float:
    """Per-capita policy-value estimate implied by a solve report."""
    return (report.incumbent + meta["objective_constant"]) / meta["n_rows"]
