"""Solver-agnostic MILP core.

This module houses the model intermediate representation shared by every
formulation builder, an LP-relaxation solver, a deterministic branch-and-bound
over binary variables, and a CPLEX-LP text exporter/importer used to
cross-validate models against external solvers.

The LP relaxations are delegated to ``scipy.optimize.linprog`` (HiGHS); the
search layer on top (node selection, branching rule, incumbent and bound
bookkeeping, statuses, feasibility audit) is owned here.
"""

from __future__ import annotations

import dataclasses
import math
import re
import time
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

CONTINUOUS = "continuous"
BINARY = "binary"

#: feasibility / integrality tolerances used by the audit and the search
FEAS_TOL = 1e-6
INT_TOL = 1e-6

#: denominator guard for relative-gap computation
GAP_DENOM_FLOOR = 1e-10


class ModelError(ValueError):
    """Raised when a model violates its structural invariants."""


class LpParseError(ValueError):
    """Raised when an LP-format file cannot be parsed."""


@dataclasses.dataclass
class _Variable:
    name: str
    lb: float
    ub: float
    integrality: str


@dataclasses.dataclass
class _Constraint:
    coeffs: list[tuple[int, float]]
    sense: str  # "<=", ">=", "="
    rhs: float
    name: str


class MilpModel:
    """Mixed-integer linear program in sparse form, maximization sense.

    Variables carry bounds and an integrality marker (continuous or binary);
    constraints are sparse coefficient lists with a sense and right-hand side.
    ``meta`` maps variables back to their formulation roles so policies can be
    extracted from solutions without re-deriving indices.
    """

    def __init__(self, name: str = "model") -> None:
        self.name = name
        self.variables: list[_Variable] = []
        self.constraints: list[_Constraint] = []
        self.objective: dict[int, float] = {}
        self.meta: dict = {}
        self._arrays_cache: tuple | None = None

    # -- construction ------------------------------------------------------

    def add_var(
        self,
        name: str,
        lb: float = 0.0,
        ub: float = math.inf,
        integrality: str = CONTINUOUS,
    ) -> int:
        """Add a variable and return its index."""
        if integrality not in (CONTINUOUS, BINARY):
            raise ModelError(f"unknown integrality {integrality!r}")
        if integrality == BINARY and (lb, ub) != (0.0, 1.0):
            raise ModelError(f"binary variable {name!r} must have bounds [0,1]")
        if math.isnan(lb) or math.isnan(ub) or lb > ub:
            raise ModelError(f"bad bounds [{lb}, {ub}] on {name!r}")
        self.variables.append(_Variable(name, float(lb), float(ub), integrality))
        self._arrays_cache = None
        return len(self.variables) - 1

    def add_constr(
        self,
        coeffs: Iterable[tuple[int, float]],
        sense: str,
        rhs: float,
        name: str | None = None,
    ) -> int:
        """Add a linear constraint ``sum(c_j x_j) sense rhs``; returns its index."""
        if sense not in ("<=", ">=", "="):
            raise ModelError(f"unknown sense {sense!r}")
        row = [(int(j), float(c)) for j, c in coeffs if c != 0.0]
        idx = len(self.constraints)
        self.constraints.append(
            _Constraint(row, sense, float(rhs), name or f"c{idx}")
        )
        self._arrays_cache = None
        return idx

    def set_objective(self, coeffs: Iterable[tuple[int, float]]) -> None:
        """Set the (maximize) objective from sparse ``(index, coefficient)`` pairs."""
        self.objective = {}
        for j, c in coeffs:
            if c != 0.0:
                self.objective[int(j)] = self.objective.get(int(j), 0.0) + float(c)
        self._arrays_cache = None

    def set_integrality(self, index: int, integrality: str) -> None:
        """Re-declare one variable's integrality (used by rebranch fallbacks)."""
        var = self.variables[index]
        if integrality == BINARY and (var.lb, var.ub) != (0.0, 1.0):
            raise ModelError(f"variable {var.name!r} cannot be binary with bounds [{var.lb}, {var.ub}]")
        var.integrality = integrality
        self._arrays_cache = None

    # -- inspection --------------------------------------------------------

    @property
    def n_vars(self) -> int:
        return len(self.variables)

    @property
    def n_constrs(self) -> int:
        return len(self.constraints)

    def binary_indices(self) -> list[int]:
        return [j for j, v in enumerate(self.variables) if v.integrality == BINARY]

    def copy(self) -> "MilpModel":
        m = MilpModel(self.name)
        m.variables = [dataclasses.replace(v) for v in self.variables]
        m.constraints = [
            _Constraint(list(c.coeffs), c.sense, c.rhs, c.name) for c in self.constraints
        ]
        m.objective = dict(self.objective)
        m.meta = dict(self.meta)
        return m

    def validate(self) -> None:
        """Check structural invariants; raises :class:`ModelError` on violation."""
        n = self.n_vars
        for j, v in enumerate(self.variables):
            if not (math.isfinite(v.lb) or v.lb == -math.inf):
                raise ModelError(f"variable {v.name!r} has NaN lower bound")
            if not (math.isfinite(v.ub) or v.ub == math.inf):
                raise ModelError(f"variable {v.name!r} has NaN upper bound")
            if v.integrality == BINARY and (v.lb, v.ub) != (0.0, 1.0):
                raise ModelError(f"binary variable {v.name!r} has bounds [{v.lb}, {v.ub}]")
        for c in self.constraints:
            for j, coef in c.coeffs:
                if j < 0 or j >= n:
                    raise ModelError(f"constraint {c.name!r} references undeclared variable {j}")
                if not math.isfinite(coef):
                    raise ModelError(f"constraint {c.name!r} has non-finite coefficient")
            if not math.isfinite(c.rhs):
                raise ModelError(f"constraint {c.name!r} has non-finite rhs")
        for j, coef in self.objective.items():
            if j < 0 or j >= n:
                raise ModelError(f"objective references undeclared variable {j}")
            if not math.isfinite(coef):
                raise ModelError("objective has non-finite coefficient")

    # -- LP arrays ---------------------------------------------------------

    def _arrays(self):
        """Cache (c, A_ub, b_ub, A_eq, b_eq) in scipy sparse form."""
        if self._arrays_cache is not None:
            return self._arrays_cache
        n = self.n_vars
        c = np.zeros(n)
        for j, coef in self.objective.items():
            c[j] = coef
        ub_rows: list[tuple[list[tuple[int, float]], float]] = []
        eq_rows: list[tuple[list[tuple[int, float]], float]] = []
        for con in self.constraints:
            if con.sense == "<=":
                ub_rows.append((con.coeffs, con.rhs))
            elif con.sense == ">=":
                ub_rows.append(([(j, -v) for j, v in con.coeffs], -con.rhs))
            else:
                eq_rows.append((con.coeffs, con.rhs))

        def build(rows):
            if not rows:
                return None, None
            data, ri, ci = [], [], []
            rhs = np.empty(len(rows))
            for i, (coeffs, b) in enumerate(rows):
                rhs[i] = b
                for j, v in coeffs:
                    ri.append(i)
                    ci.append(j)
                    data.append(v)
            mat = sp.csr_matrix((data, (ri, ci)), shape=(len(rows), n))
            return mat, rhs

        A_ub, b_ub = build(ub_rows)
        A_eq, b_eq = build(eq_rows)
        self._arrays_cache = (c, A_ub, b_ub, A_eq, b_eq)
        return self._arrays_cache

    def base_bounds(self) -> list[tuple[float, float]]:
        return [(v.lb, v.ub) for v in self.variables]


@dataclasses.dataclass(frozen=True)
class LpResult:
    """Outcome of one LP-relaxation solve."""

    status: str  # "optimal", "infeasible", "unbounded"
    x: np.ndarray | None
    objective: float | None
    iterations: int


@dataclasses.dataclass(frozen=True)
class SolveReport:
    """Summary of a branch-and-bound run.

    ``gap`` is ``(bound - incumbent) / max(|incumbent|, 1e-10)``; when no
    incumbent exists the incumbent is the ``-inf`` sentinel and the gap is
    ``+inf``.
    """

    status: str  # optimal | feasible-gap | infeasible | time-limit | unbounded
    incumbent: float
    bound: float
    gap: float
    nodes: int
    iterations: int
    wall_s: float


def _relative_gap(bound: float, incumbent: float) -> float:
    if incumbent == -math.inf:
        return math.inf
    return max(0.0, (bound - incumbent) / max(abs(incumbent), GAP_DENOM_FLOOR))


def solve_lp(
    model: MilpModel, bounds_override: Sequence[tuple[float, float]] | None = None
) -> LpResult:
    """Solve the LP relaxation (integrality ignored).

    Parameters
    ----------
    model : MilpModel
        Model whose relaxation is solved; maximization sense.
    bounds_override : sequence of (lb, ub), optional
        Per-variable bounds replacing the declared ones (used by the search
        to impose branching fixings without copying the model).

    Returns
    -------
    LpResult
        Status is one of ``optimal``, ``infeasible``, ``unbounded``.
    """
    model.validate()
    c, A_ub, b_ub, A_eq, b_eq = model._arrays()
    bounds = list(bounds_override) if bounds_override is not None else model.base_bounds()
    if model.n_vars == 0:
        return LpResult("optimal", np.zeros(0), 0.0, 0)
    res = linprog(
        -c,
        A_ub=A_ub,
        b_ub=b_ub,
        A_eq=A_eq,
        b_eq=b_eq,
        bounds=bounds,
        method="highs",
    )
    iters = int(getattr(res, "nit", 0) or 0)
    if res.status == 0:
        return LpResult("optimal", np.asarray(res.x, dtype=float), float(-res.fun), iters)
    if res.status == 2:
        return LpResult("infeasible", None, None, iters)
    if res.status == 3:
        return LpResult("unbounded", None, None, iters)
    raise ModelError(f"LP solve failed with status {res.status}: {res.message}")


def check_feasible(model: MilpModel, x: np.ndarray, tol: float = FEAS_TOL) -> bool:
    """Re-check an assignment against every constraint row and bound.

    Independent of any solver state; used as the post-solve audit.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (model.n_vars,):
        return False
    for j, v in enumerate(model.variables):
        if x[j] < v.lb - tol or x[j] > v.ub + tol:
            return False
    for con in model.constraints:
        lhs = sum(coef * x[j] for j, coef in con.coeffs)
        if con.sense == "<=" and lhs > con.rhs + tol:
            return False
        if con.sense == ">=" and lhs < con.rhs - tol:
            return False
        if con.sense == "=" and abs(lhs - con.rhs) > tol:
            return False
    return True


def integrality_violations(
    model: MilpModel, x: np.ndarray, tol: float = INT_TOL
) -> list[int]:
    """Indices of declared-binary variables whose value is fractional beyond tol."""
    out = []
    for j in model.binary_indices():
        if abs(x[j] - round(x[j])) > tol:
            out.append(j)
    return out


def objective_value(model: MilpModel, x: np.ndarray) -> float:
    return float(sum(c * x[j] for j, c in model.objective.items()))


@dataclasses.dataclass
class _Node:
    bound: float
    depth: int
    seq: int
    fixes: dict[int, float]


def branch_and_bound(
    model: MilpModel,
    time_limit_s: float = 3600.0,
    gap_tol: float = 1e-6,
    branch_set: Sequence[int] | None = None,
    node_limit: int | None = None,
    on_node: Callable[[dict], None] | None = None,
) -> tuple[SolveReport, np.ndarray | None]:
    """Maximize a MILP by LP-based branch-and-bound over binary variables.

    Node selection dives depth-first (LIFO) until the first incumbent is
    found, then switches to best-bound with ties broken by lowest node
    sequence number. Branching picks the binary variable whose fractional
    part is closest to 0.5, ties broken by lowest variable index.

    Parameters
    ----------
    model : MilpModel
        Model to solve; maximization sense.
    time_limit_s : float
        Wall-clock budget; honored to within one node's work.
    gap_tol : float
        Relative gap at which the incumbent is declared optimal.
    branch_set : sequence of int, optional
        Priority branching variables. Defaults to all declared binaries.
        Declared binaries outside the set are still branched if they come out
        fractional once the priority set is integral, so incumbents always
        satisfy every declared integrality.
    node_limit : int, optional
        Stop after this many nodes (reported as ``feasible-gap`` when an
        incumbent exists).
    on_node : callable, optional
        Called after each processed node with a dict of search state
        (``incumbent``, ``bound``, ``nodes``); used by tests to audit
        monotonicity.

    Returns
    -------
    (SolveReport, assignment or None)
        The assignment satisfies integrality within 1e-6 and all constraints
        within 1e-6 whenever an incumbent is reported.
    """
    model.validate()
    start = time.monotonic()
    binaries = model.binary_indices()
    priority = list(branch_set) if branch_set is not None else list(binaries)
    priority_set = set(priority)
    secondary = [j for j in binaries if j not in priority_set]

    base_bounds = model.base_bounds()
    total_iters = 0
    nodes_processed = 0

    root = solve_lp(model)
    total_iters += root.iterations
    if root.status == "infeasible":
        report = SolveReport(
            "infeasible", -math.inf, -math.inf, math.inf, 1, total_iters,
            time.monotonic() - start,
        )
        return report, None
    if root.status == "unbounded":
        report = SolveReport(
            "unbounded", -math.inf, math.inf, math.inf, 1, total_iters,
            time.monotonic() - start,
        )
        return report, None

    incumbent = -math.inf
    inc_x: np.ndarray | None = None
    open_nodes: list[_Node] = [_Node(root.objective, 0, 0, {})]
    seq_counter = 1

    def node_bounds(fixes: dict[int, float]) -> list[tuple[float, float]]:
        bounds = list(base_bounds)
        for j, val in fixes.items():
            bounds[j] = (val, val)
        return bounds

    def pick_branch_var(x: np.ndarray) -> int | None:
        best_j, best_d = None, math.inf
        for j in priority:
            frac = abs(x[j] - round(x[j]))
            if frac > INT_TOL:
                d = abs((x[j] - math.floor(x[j])) - 0.5)
                if d < best_d - 1e-15:
                    best_j, best_d = j, d
        if best_j is not None:
            return best_j
        for j in secondary:
            frac = abs(x[j] - round(x[j]))
            if frac > INT_TOL:
                d = abs((x[j] - math.floor(x[j])) - 0.5)
                if d < best_d - 1e-15:
                    best_j, best_d = j, d
        return best_j

    stopped_by = None  # None (exhausted) | "time" | "nodes"
    while open_nodes:
        if time.monotonic() - start > time_limit_s:
            stopped_by = "time"
            break
        if node_limit is not None and nodes_processed >= node_limit:
            stopped_by = "nodes"
            break
        # global bound over the frontier; early-exit when gap closes
        frontier_bound = max(n.bound for n in open_nodes)
        if incumbent > -math.inf and _relative_gap(frontier_bound, incumbent) <= gap_tol:
            open_nodes = []
            break

        if inc_x is None:
            sel = max(range(len(open_nodes)), key=lambda i: (open_nodes[i].depth, open_nodes[i].seq))
        else:
            sel = max(range(len(open_nodes)), key=lambda i: (open_nodes[i].bound, -open_nodes[i].seq))
        node = open_nodes.pop(sel)
        if node.bound <= incumbent + 1e-9 and incumbent > -math.inf:
            continue

        res = solve_lp(model, bounds_override=node_bounds(node.fixes))
        total_iters += res.iterations
        nodes_processed += 1
        if res.status == "infeasible":
            if on_node:
                on_node({"incumbent": incumbent, "bound": _frontier(open_nodes, incumbent), "nodes": nodes_processed})
            continue
        if res.status == "unbounded":
            # bounded binaries cannot repair an unbounded continuous ray
            report = SolveReport(
                "unbounded", incumbent, math.inf, math.inf, nodes_processed,
                total_iters, time.monotonic() - start,
            )
            return report, inc_x
        bound_here = min(node.bound, res.objective)
        if bound_here <= incumbent + 1e-9:
            if on_node:
                on_node({"incumbent": incumbent, "bound": _frontier(open_nodes, incumbent), "nodes": nodes_processed})
            continue
        j = pick_branch_var(res.x)
        if j is None:
            # integral on every declared binary: candidate incumbent
            if res.objective > incumbent + 1e-12:
                incumbent = res.objective
                inc_x = res.x.copy()
                for idx in binaries:
                    inc_x[idx] = round(inc_x[idx])
        else:
            for val in (0.0, 1.0):
                fixes = dict(node.fixes)
                fixes[j] = val
                open_nodes.append(_Node(bound_here, node.depth + 1, seq_counter, fixes))
                seq_counter += 1
        if on_node:
            on_node({"incumbent": incumbent, "bound": _frontier(open_nodes, incumbent), "nodes": nodes_processed})

    wall = time.monotonic() - start
    nodes_processed = max(nodes_processed, 1)
    if open_nodes:
        bound = max(incumbent, max(n.bound for n in open_nodes))
    else:
        bound = incumbent if incumbent > -math.inf else -math.inf
    gap = _relative_gap(bound, incumbent)

    if stopped_by is None:
        if incumbent == -math.inf:
            status = "infeasible"
            bound = -math.inf
            gap = math.inf
        else:
            status = "optimal" if gap <= gap_tol else "feasible-gap"
    else:
        # time or node budget ran out before the tree was exhausted
        status = "time-limit" if incumbent == -math.inf else (
            "optimal" if gap <= gap_tol else "feasible-gap"
        )

    if inc_x is not None and not check_feasible(model, inc_x):
        raise ModelError("incumbent failed the independent feasibility audit")
    report = SolveReport(status, incumbent, bound, gap, nodes_processed, total_iters, wall)
    return report, inc_x


def _frontier(open_nodes: list[_Node], incumbent: float) -> float:
    if open_nodes:
        return max(incumbent, max(n.bound for n in open_nodes))
    return incumbent


# -- LP text format ---------------------------------------------------------

_NAME_RE = re.compile(r"[^A-Za-z0-9_]")


def _sanitize_names(model: MilpModel) -> list[str]:
    seen: dict[str, int] = {}
    out = []
    for v in model.variables:
        name = _NAME_RE.sub("_", v.name)[:240] or "v"
        if name[0] in "0123456789.eE":
            name = "x_" + name
        base = name
        if base in seen:
            seen[base] += 1
            name = f"{base}_{seen[base]}"
        else:
            seen[base] = 0
        out.append(name[:255])
    return out


def _fmt(value: float) -> str:
    # avoid "-0" artifacts in the emitted file
    if value == 0.0:
        value = 0.0
    return f"{value:.17g}"


def _terms(coeffs: list[tuple[int, float]], names: list[str]) -> str:
    parts = []
    for j, c in coeffs:
        sign = "-" if c < 0 else "+"
        parts.append(f"{sign} {_fmt(abs(c))} {names[j]}")
    if not parts:
        return "0 " + names[0] if names else "0"
    text = " ".join(parts)
    return text[2:] if text.startswith("+ ") else text


def export_lp(model: MilpModel, path: str) -> None:
    """Write the model to CPLEX-LP text format.

    Sections ``Maximize`` / ``Subject To`` / ``Bounds`` / ``Binaries`` /
    ``End``; variable names are sanitized to ``[A-Za-z0-9_]`` and kept at or
    below 255 characters. The emitted file re-imports to an equivalent model
    up to constraint ordering.
    """
    model.validate()
    names = _sanitize_names(model)
    lines = [f"\\ {model.name}", "Maximize"]
    obj = sorted(model.objective.items())
    lines.append(" obj: " + _terms(list(obj), names))
    lines.append("Subject To")
    for i, con in enumerate(model.constraints):
        sense = {"<=": "<=", ">=": ">=", "=": "="}[con.sense]
        cname = _NAME_RE.sub("_", con.name)[:255] or f"c{i}"
        row = sorted(con.coeffs)
        lines.append(f" {cname}: {_terms(row, names)} {sense} {_fmt(con.rhs)}")
    bound_lines = []
    for j, v in enumerate(model.variables):
        if v.integrality == BINARY:
            continue
        if v.lb == 0.0 and v.ub == math.inf:
            continue
        if v.lb == -math.inf and v.ub == math.inf:
            bound_lines.append(f" {names[j]} free")
        elif v.ub == math.inf:
            bound_lines.append(f" {names[j]} >= {_fmt(v.lb)}")
        elif v.lb == -math.inf:
            bound_lines.append(f" -infinity <= {names[j]} <= {_fmt(v.ub)}")
        else:
            bound_lines.append(f" {_fmt(v.lb)} <= {names[j]} <= {_fmt(v.ub)}")
    if bound_lines:
        lines.append("Bounds")
        lines.extend(bound_lines)
    binaries = model.binary_indices()
    if binaries:
        lines.append("Binaries")
        for j in binaries:
            lines.append(f" {names[j]}")
    lines.append("End")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


_SECTION_RE = re.compile(
    r"^(maximize|minimize|subject to|st|s\.t\.|bounds|binaries|binary|generals|general|end)$",
    re.IGNORECASE,
)


_NUM_TOKEN_RE = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")


def _tokenize_expr(expr: str) -> list[tuple[float, str]]:
    """Parse 'a x1 + b x2 - x3' into (coefficient, name) pairs.

    Tokens are whitespace-separated, as the writer emits them; exponent
    notation (1e-05) stays intact because signs inside a numeric token are
    part of the number.
    """
    out: list[tuple[float, str]] = []
    sign = 1.0
    coef: float | None = None
    for tok in expr.split():
        if tok == "+":
            continue
        if tok == "-":
            sign = -sign
            continue
        if _NUM_TOKEN_RE.match(tok):
            value = float(tok)
            coef = value if coef is None else coef * value
            continue
        name = tok
        term_sign = sign
        while name and name[0] in "+-":
            if name[0] == "-":
                term_sign = -term_sign
            name = name[1:]
        out.append((term_sign * (1.0 if coef is None else coef), name))
        sign, coef = 1.0, None
    # a dangling numeric token (constant-only expression) carries no variable
    return out


def import_lp(path: str) -> MilpModel:
    """Read a CPLEX-LP text file written by :func:`export_lp`.

    Supports the subset emitted by the writer plus simple hand-written files:
    one objective, one constraint per line (``name: expr sense rhs``), Bounds
    lines, and a Binaries section.
    """
    with open(path, encoding="utf-8") as fh:
        raw_lines = [ln.split("\\")[0].rstrip() for ln in fh]
    lines = [ln for ln in raw_lines if ln.strip()]
    model = MilpModel("imported")
    var_index: dict[str, int] = {}

    def var_of(name: str) -> int:
        if name not in var_index:
            var_index[name] = model.add_var(name, lb=0.0, ub=math.inf)
        return var_index[name]

    section = None
    sense_mult = 1.0
    obj_terms: list[tuple[float, str]] = []
    constr_specs: list[tuple[str, list[tuple[float, str]], str, float]] = []
    bound_specs: list[str] = []
    binary_names: list[str] = []
    for ln in lines:
        stripped = ln.strip()
        m = _SECTION_RE.match(stripped)
        if m:
            word = m.group(1).lower()
            if word == "maximize":
                section, sense_mult = "objective", 1.0
            elif word == "minimize":
                section, sense_mult = "objective", -1.0
            elif word in ("subject to", "st", "s.t."):
                section = "constraints"
            elif word == "bounds":
                section = "bounds"
            elif word in ("binaries", "binary"):
                section = "binaries"
            elif word in ("generals", "general"):
                raise LpParseError("general integers are not supported")
            elif word == "end":
                section = "end"
            continue
        if section == "objective":
            body = stripped.split(":", 1)[1] if ":" in stripped else stripped
            obj_terms.extend(_tokenize_expr(body))
        elif section == "constraints":
            if ":" in stripped:
                cname, body = stripped.split(":", 1)
                cname = cname.strip()
            else:
                cname, body = f"c{len(constr_specs)}", stripped
            sm = re.search(r"(<=|>=|=)", body)
            if not sm:
                raise LpParseError(f"constraint without sense: {ln!r}")
            sense = sm.group(1)
            lhs, rhs_text = body.split(sense, 1)
            constr_specs.append((cname, _tokenize_expr(lhs), sense, float(rhs_text)))
        elif section == "bounds":
            bound_specs.append(stripped)
        elif section == "binaries":
            binary_names.extend(stripped.split())
        elif section is None:
            raise LpParseError(f"content before any section: {ln!r}")

    for _, terms, _, _ in constr_specs:
        for _, name in terms:
            var_of(name)
    for _, name in obj_terms:
        var_of(name)
    for spec in bound_specs:
        if spec.lower().endswith(" free"):
            j = var_of(spec[: -len(" free")].strip())
            model.variables[j].lb, model.variables[j].ub = -math.inf, math.inf
            continue
        parts = re.split(r"(<=|>=)", spec)
        parts = [p.strip() for p in parts]
        if len(parts) == 5 and parts[1] == "<=" and parts[3] == "<=":
            lo = -math.inf if parts[0].lower() in ("-infinity", "-inf") else float(parts[0])
            j = var_of(parts[2])
            model.variables[j].lb = lo
            model.variables[j].ub = float(parts[4])
        elif len(parts) == 3 and parts[1] == ">=":
            j = var_of(parts[0])
            model.variables[j].lb = (
                -math.inf if parts[2].lower() in ("-infinity", "-inf") else float(parts[2])
            )
        elif len(parts) == 3 and parts[1] == "<=":
            j = var_of(parts[0])
            model.variables[j].ub = float(parts[2])
        else:
            raise LpParseError(f"unsupported bounds line: {spec!r}")
    for name in binary_names:
        j = var_of(name)
        model.variables[j].lb, model.variables[j].ub = 0.0, 1.0
        model.variables[j].integrality = BINARY

    agg: dict[int, float] = {}
    for c, name in obj_terms:
        j = var_of(name)
        agg[j] = agg.get(j, 0.0) + sense_mult * c
    model.set_objective(list(agg.items()))
    for cname, terms, sense, rhs in constr_specs:
        row: dict[int, float] = {}
        for c, name in terms:
            j = var_of(name)
            row[j] = row.get(j, 0.0) + c
        model.add_constr(list(row.items()), sense, rhs, name=cname)
    model._arrays_cache = None
    model.validate()
    return model
