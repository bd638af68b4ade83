"""Experiment harness and command line surface.

Wraps the library end to end: dataset generation, nuisance fitting, tree
learning through either the MIO solver or exhaustive search, policy
evaluation, LP export, and the benchmark grids. Experiments are described
by a JSON config (or equivalent flags) and emit per-seed result rows, a
mean/std aggregate, saved policies and solve reports, and a small summary
figure next to the result CSV.

Exit codes: 0 success, 2 configuration error, 3 infeasible model,
4 partial failure across seeds.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import click
import numpy as np

from . import __version__, exact, milp
from .data import (
    Dataset,
    SyntheticConfig,
    WarfarinConfig,
    gen_confounded_binary,
    gen_confounded_graded,
    gen_synthetic,
    gen_warfarin,
    load_csv,
    write_csv,
)
from .estimators import OutcomeModel, PropensityModel, load_model, save_model
from .formulations import (
    FormulationConfig,
    InfeasibleModelError,
    add_assignment_parity,
    add_branching_limit,
    add_conditional_parity,
    add_outcome_parity,
    add_treatment_budgets,
    build_dm_model,
    build_dr_model,
    build_ipw_model,
    build_kpt_model,
    objective_estimate,
    relax_assignments,
    solve_model,
)
from .policy import evaluate, load_tree, save_tree

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_PARTIAL = 4

_METHODS = ("ipw", "dm", "dr", "kpt", "bpt")
_MU_KINDS = {"true": None, "logistic": "logistic", "cart": "cart-classifier"}
_NU_KINDS = {
    "linear": "linear",
    "lasso": "lasso",
    "cart": "cart-regressor",
    "forest": "random-forest",
}
_EXTENSION_KEYS = (
    "max_branches",
    "budgets",
    "assignment_parity",
    "conditional_parity",
    "outcome_parity",
    "randomized",
)
_RESULT_COLUMNS = (
    "seed", "method", "depth", "solver", "status", "objective",
    "oosp", "true_value", "regret", "gap", "nodes", "error",
)


class ConfigError(ValueError):
    """The experiment description is invalid; nothing was run."""


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """Validated description of one experiment.

    ``dataset`` holds a kind ("synthetic", "warfarin", or "csv") plus the
    generator parameters or file paths. Nuisance choices must match the
    method: the weighting objective needs a propensity model, the
    regression objective an outcome model, the doubly robust objective
    both, and the baselines neither.
    """

    dataset: dict
    method: str
    depth: int = 1
    propensity: str | None = None
    outcome: str | None = None
    solver: str = "milp"
    time_limit_s: float = 3600.0
    gap_tol: float = 1e-6
    theta: float = 0.5
    extensions: dict = dataclasses.field(default_factory=dict)
    seeds: tuple = (0,)
    output_dir: str | None = None

    def __post_init__(self):
        if self.method not in _METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.solver not in ("milp", "exact"):
            raise ConfigError(f"unknown solver {self.solver!r}")
        if self.depth < 0:
            raise ConfigError("depth must be nonnegative")
        if self.method in ("kpt", "bpt") and self.depth < 1:
            raise ConfigError(f"{self.method} requires depth >= 1")
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError("theta must lie in [0, 1]")
        if self.time_limit_s <= 0 or self.gap_tol < 0:
            raise ConfigError("bad solver parameters")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        needs_mu = self.method in ("ipw", "dr")
        needs_nu = self.method in ("dm", "dr")
        if needs_mu and self.propensity is None:
            raise ConfigError(f"method {self.method!r} needs a propensity model")
        if not needs_mu and self.propensity is not None:
            raise ConfigError(f"method {self.method!r} takes no propensity model")
        if needs_nu and self.outcome is None:
            raise ConfigError(f"method {self.method!r} needs an outcome model")
        if not needs_nu and self.outcome is not None:
            raise ConfigError(f"method {self.method!r} takes no outcome model")
        if self.propensity is not None and self.propensity not in _MU_KINDS:
            raise ConfigError(f"unknown propensity kind {self.propensity!r}")
        if self.outcome is not None and self.outcome not in _NU_KINDS:
            raise ConfigError(f"unknown outcome kind {self.outcome!r}")
        if self.method == "bpt" and self.solver != "exact":
            raise ConfigError("bpt is solved by enumeration; use solver 'exact'")
        if self.extensions:
            bad = set(self.extensions) - set(_EXTENSION_KEYS)
            if bad:
                raise ConfigError(f"unknown extensions: {sorted(bad)}")
            if self.method not in ("dm", "dr"):
                raise ConfigError("extensions attach only to dm or dr models")
            if self.solver != "milp":
                raise ConfigError("extensions require the milp solver")
        kind = self.dataset.get("kind")
        if kind not in ("synthetic", "warfarin", "csv"):
            raise ConfigError(f"unknown dataset kind {kind!r}")
        if kind == "csv" and "train" not in self.dataset:
            raise ConfigError("csv dataset needs a 'train' path")
        try:
            _dataset_configs(self, int(self.seeds[0]))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad dataset parameters: {exc}") from exc

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        out = dict(raw)
        if "seeds" in out:
            out["seeds"] = tuple(int(s) for s in out["seeds"])
        if "extensions" in out and out["extensions"] is None:
            out["extensions"] = {}
        try:
            return cls(**out)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def as_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["seeds"] = list(self.seeds)
        return out


def _dataset_configs(cfg: ExperimentConfig, seed: int):
    """Instantiate the generator config for one seed (validates parameters)."""
    spec = cfg.dataset
    if spec["kind"] == "synthetic":
        return SyntheticConfig(
            n_train=int(spec.get("n_train", 500)),
            n_test=int(spec.get("n_test", 10000)),
            p_correct=float(spec.get("p", 0.5)),
            noise_sd=float(spec.get("noise_sd", 0.1)),
            seed=seed,
        )
    if spec["kind"] == "warfarin":
        return WarfarinConfig(
            n_patients=int(spec.get("n_train", 1000)),
            n_test=int(spec.get("n_test", 1387)),
            perturb_range=float(spec.get("r", 0.0)),
            outcome_noise_sd=float(spec.get("noise_sd", 0.02)),
            seed=seed,
        )
    return spec


def _load_dataset(cfg: ExperimentConfig, seed: int):
    spec = _dataset_configs(cfg, seed)
    if isinstance(spec, SyntheticConfig):
        return gen_synthetic(spec)
    if isinstance(spec, WarfarinConfig):
        return gen_warfarin(spec)
    train = load_csv(spec["train"], _schema_for(spec["train"], spec.get("schema")))
    test = None
    if spec.get("test"):
        test = load_csv(spec["test"], _schema_for(spec["test"], spec.get("schema")))
    return train, test


def _schema_for(csv_path: str, schema_path: str | None) -> dict:
    path = schema_path or csv_path.rsplit(".", 1)[0] + ".schema.json"
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _fit_nuisances(cfg: ExperimentConfig, train: Dataset, seed: int):
    """Fit the configured nuisance models on the training split."""
    mu = nu = None
    if cfg.propensity == "true":
        if train.true_propensity is None:
            raise RuntimeError(
                "true propensity scores are not available for this dataset"
            )
        mu = train.true_propensity
    elif cfg.propensity is not None:
        mu = PropensityModel(kind=_MU_KINDS[cfg.propensity]).fit(train)
    if cfg.outcome is not None:
        nu = OutcomeModel(kind=_NU_KINDS[cfg.outcome], seed=seed).fit(train)
    return mu, nu


def _apply_extensions(model, meta, ext: dict):
    if "max_branches" in ext:
        model, meta = add_branching_limit(model, meta, int(ext["max_branches"]))
    if "budgets" in ext:
        caps = {int(k): float(v) for k, v in ext["budgets"].items()}
        model, meta = add_treatment_budgets(model, meta, caps)
    if "assignment_parity" in ext:
        model, meta = add_assignment_parity(model, meta, float(ext["assignment_parity"]))
    if "conditional_parity" in ext:
        model, meta = add_conditional_parity(model, meta, float(ext["conditional_parity"]))
    if "outcome_parity" in ext:
        spec = ext["outcome_parity"]
        if isinstance(spec, (list, tuple)):
            delta, convention = float(spec[0]), str(spec[1])
        else:
            delta, convention = float(spec), "sum"
        model, meta = add_outcome_parity(model, meta, delta, convention=convention)
    if ext.get("randomized"):
        model, meta = relax_assignments(model, meta)
    return model, meta


def learn_tree(ds: Dataset, method: str, depth: int, propensity=None, outcome=None,
               solver: str = "milp", time_limit_s: float = 3600.0,
               gap_tol: float = 1e-6, extensions: dict | None = None,
               theta: float = 0.5):
    """Learn a prescriptive tree with the chosen objective and solver.

    The "milp" solver builds the flow formulation and runs branch and
    bound; "exact" enumerates every tree structure and scores it directly.
    Both return the same optimum, so the exact path doubles as an oracle
    and as a fast route for small feature counts.

    Returns
    -------
    (PrescriptiveTree, dict)
        The tree and a solve summary with keys ``objective`` (per-capita
        in-sample estimate), ``status``, ``gap``, ``nodes``, and ``wall_s``.
    """
    start = time.monotonic()
    if solver == "exact":
        if extensions:
            raise ConfigError("extensions require the milp solver")
        if method == "kpt":
            tree, value = exact.solve_kpt(ds, depth)
        elif method == "bpt":
            tree, detail = exact.solve_bpt(ds, depth, theta)
            value = detail["score"]
        else:
            scorer = exact.scorer_for(method, ds, propensity=propensity, outcome=outcome)
            tree, total = exact.enumerate_trees(ds.features, depth, scorer)
            value = total / ds.n_rows
        info = {
            "objective": float(value), "status": "optimal", "gap": 0.0,
            "nodes": None, "iterations": None,
            "wall_s": time.monotonic() - start, "solver": "exact",
        }
        return tree, info

    cfg = FormulationConfig(depth=depth)
    if method == "ipw":
        model, meta = build_ipw_model(ds, propensity, cfg)
    elif method == "dm":
        model, meta = build_dm_model(ds, outcome, cfg)
    elif method == "dr":
        model, meta = build_dr_model(ds, propensity, outcome, cfg)
    elif method == "kpt":
        model, meta = build_kpt_model(ds, cfg)
    else:
        raise ConfigError("bpt is solved by enumeration; use solver 'exact'")
    if extensions:
        model, meta = _apply_extensions(model, meta, extensions)
    tree, report, _ = solve_model(
        model, meta, time_limit_s=time_limit_s, gap_tol=gap_tol
    )
    info = {
        "objective": objective_estimate(meta, report), "status": report.status,
        "gap": report.gap, "nodes": report.nodes, "iterations": report.iterations,
        "wall_s": time.monotonic() - start, "solver": "milp",
    }
    return tree, info


# -- experiment harness -----------------------------------------------------------


def _run_seed(cfg: ExperimentConfig, seed: int) -> dict:
    """One seed's pipeline: generate, fit, solve, evaluate."""
    out = {
        "seed": seed, "method": cfg.method, "depth": cfg.depth,
        "solver": cfg.solver, "status": "", "objective": None, "oosp": None,
        "true_value": None, "regret": None, "gap": None, "nodes": None,
        "error": "", "tree": None, "info": None,
    }
    try:
        train, test = _load_dataset(cfg, seed)
        mu, nu = _fit_nuisances(cfg, train, seed)
        tree, info = learn_tree(
            train, cfg.method, cfg.depth, propensity=mu, outcome=nu,
            solver=cfg.solver, time_limit_s=cfg.time_limit_s,
            gap_tol=cfg.gap_tol, extensions=cfg.extensions or None,
            theta=cfg.theta,
        )
        out.update(status=info["status"], objective=info["objective"],
                   gap=info["gap"], nodes=info["nodes"], tree=tree, info=info)
        if test is not None and test.counterfactuals is not None:
            report = evaluate(tree, test)
            out.update(oosp=report.oosp, true_value=report.true_value,
                       regret=report.regret)
    except InfeasibleModelError as exc:
        out.update(status="infeasible", error=str(exc))
    except Exception as exc:  # noqa: BLE001 - per-seed isolation is the contract
        out.update(status="error", error=f"{type(exc).__name__}: {exc}")
    return out


def _worker_count(n_tasks: int) -> int:
    raw = os.environ.get("PRESCRIBE_OPT_THREADS", "1")
    try:
        cap = max(1, int(raw))
    except ValueError:
        cap = 1
    return max(1, min(cap, n_tasks))


def _run_seeds(cfg: ExperimentConfig) -> list:
    seeds = list(cfg.seeds)
    workers = _worker_count(len(seeds))
    if workers == 1:
        results = [_run_seed(cfg, s) for s in seeds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda s: _run_seed(cfg, s), seeds))
    return sorted(results, key=lambda r: r["seed"])


_NUMERIC_AGG = ("objective", "oosp", "true_value", "regret", "gap", "nodes")


def aggregate_rows(rows: list) -> list:
    """Mean and sample-std rows over the seeds that completed."""
    ok = [r for r in rows if not r["error"]]
    if not ok:
        return []
    out = []
    for stat in ("mean", "std"):
        row = {
            "seed": stat, "method": ok[0]["method"], "depth": ok[0]["depth"],
            "solver": ok[0]["solver"], "status": "aggregate", "error": "",
        }
        for col in _NUMERIC_AGG:
            vals = [r[col] for r in ok if r[col] is not None]
            if not vals:
                row[col] = None
            elif stat == "mean":
                row[col] = float(np.mean(vals))
            else:
                row[col] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        out.append(row)
    return out


def _fmt_cell(value) -> str:
    if value is None or value == "":
        return "" if value is None else str(value)
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.10g}"


def write_result_csv(rows: list, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_RESULT_COLUMNS)
        for row in rows:
            writer.writerow([_fmt_cell(row.get(col)) for col in _RESULT_COLUMNS])


def render_result_figure(rows: list, path: str) -> None:
    """Per-seed summary chart rendered next to the result CSV."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    seed_rows = [r for r in rows if isinstance(r["seed"], (int, np.integer))]
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    labels = [str(r["seed"]) for r in seed_rows]
    metric, title = ("oosp", "out-of-sample optimality") if any(
        r["oosp"] is not None for r in seed_rows
    ) else ("objective", "in-sample objective")
    vals = [r[metric] if r[metric] is not None else np.nan for r in seed_rows]
    bars = ax.bar(labels, vals, color="#4878d0")
    for bar, row in zip(bars, seed_rows):
        if row["error"]:
            bar.set_color("#d65f5f")
    finite = [v for v in vals if np.isfinite(v)]
    if finite:
        ax.axhline(np.mean(finite), color="#333333", linewidth=1, linestyle="--")
    ax.set_xlabel("seed")
    ax.set_ylabel(metric)
    ax.set_title(f"{seed_rows[0]['method']} depth {seed_rows[0]['depth']}: {title}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run every seed of an experiment and write its artifacts.

    Returns a summary dict with the rows, aggregate rows, output paths,
    and the process exit code implied by the per-seed outcomes.
    """
    results = _run_seeds(cfg)
    rows = [{k: v for k, v in r.items() if k not in ("tree", "info")}
            for r in results]
    aggregates = aggregate_rows(rows)
    failures = [r for r in rows if r["error"]]

    paths = {}
    if cfg.output_dir:
        os.makedirs(cfg.output_dir, exist_ok=True)
        paths["results"] = os.path.join(cfg.output_dir, "results.csv")
        write_result_csv(rows + aggregates, paths["results"])
        paths["figure"] = os.path.join(cfg.output_dir, "results.png")
        render_result_figure(rows, paths["figure"])
        for res in results:
            if res["tree"] is not None:
                p = os.path.join(cfg.output_dir, f"policy_seed{res['seed']}.json")
                save_tree(res["tree"], p)
            if res["info"] is not None:
                p = os.path.join(cfg.output_dir, f"solve_seed{res['seed']}.json")
                with open(p, "w", encoding="utf-8") as fh:
                    json.dump(res["info"], fh, indent=2)
        canon = json.dumps(cfg.as_dict(), sort_keys=True)
        manifest = {
            "config": cfg.as_dict(),
            "config_sha256": hashlib.sha256(canon.encode()).hexdigest(),
            "package_version": __version__,
            "numpy_version": np.__version__,
            "n_seeds": len(rows),
            "n_failures": len(failures),
            "failed_seeds": [r["seed"] for r in failures],
        }
        paths["manifest"] = os.path.join(cfg.output_dir, "manifest.json")
        with open(paths["manifest"], "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2)

    if not failures:
        code = EXIT_OK
    elif len(failures) == len(rows) and all(
        r["status"] == "infeasible" for r in failures
    ):
        code = EXIT_INFEASIBLE
    else:
        code = EXIT_PARTIAL
    return {"rows": rows, "aggregates": aggregates, "paths": paths,
            "exit_code": code}


# -- benchmark suites -------------------------------------------------------------


def parse_method_token(token: str) -> dict:
    """Decode a compact benchmark method token.

    Grammar: ``kpt``, ``bpt``, ``ipw-<mu>``, ``dm-<nu>``, ``dr-<nu>-<mu>``
    with mu in {true, log, dt} and nu in {lr, lasso, dt, rf}.
    """
    mu_alias = {"true": "true", "log": "logistic", "dt": "cart"}
    nu_alias = {"lr": "linear", "lasso": "lasso", "dt": "cart", "rf": "forest"}
    parts = token.strip().split("-")
    method = parts[0]
    try:
        if method in ("kpt", "bpt"):
            if len(parts) != 1:
                raise KeyError(token)
            return {"method": method, "propensity": None, "outcome": None}
        if method == "ipw":
            return {"method": "ipw", "propensity": mu_alias[parts[1]], "outcome": None}
        if method == "dm":
            return {"method": "dm", "propensity": None, "outcome": nu_alias[parts[1]]}
        if method == "dr":
            return {"method": "dr", "propensity": mu_alias[parts[2]],
                    "outcome": nu_alias[parts[1]]}
    except (IndexError, KeyError):
        pass
    raise ConfigError(f"cannot parse method token {token!r}")


def _bench_grid(dataset_kind: str, grid_name: str, grid_values, methods, depths,
                n_seeds: int, n_train: int, n_test: int, solver: str,
                time_limit_s: float, extra: dict | None = None) -> list:
    rows = []
    for value in grid_values:
        for token in methods:
            spec = parse_method_token(token)
            for depth in depths:
                dataset = {"kind": dataset_kind, "n_train": n_train,
                           "n_test": n_test, grid_name: value, **(extra or {})}
                use_solver = "exact" if spec["method"] == "bpt" else solver
                cfg = ExperimentConfig(
                    dataset=dataset, method=spec["method"], depth=depth,
                    propensity=spec["propensity"], outcome=spec["outcome"],
                    solver=use_solver, time_limit_s=time_limit_s,
                    seeds=tuple(range(n_seeds)),
                )
                res = _run_seeds(cfg)
                ok = [r for r in res if not r["error"]]
                row = {grid_name: value, "method": token, "depth": depth,
                       "failures": len(res) - len(ok)}
                for col in ("oosp", "true_value", "objective", "gap"):
                    vals = [r[col] for r in ok if r[col] is not None]
                    row[f"{col}_mean"] = float(np.mean(vals)) if vals else None
                    row[f"{col}_std"] = (
                        float(np.std(vals, ddof=1)) if len(vals) > 1
                        else (0.0 if vals else None)
                    )
                rows.append(row)
    return rows


def _write_bench_csv(rows: list, path: str, grid_name: str) -> None:
    cols = [grid_name, "method", "depth", "oosp_mean", "oosp_std",
            "true_value_mean", "true_value_std", "objective_mean",
            "objective_std", "gap_mean", "gap_std", "failures"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in rows:
            writer.writerow([_fmt_cell(row.get(c)) for c in cols])


def _render_bench_figure(rows: list, path: str, grid_name: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    series = sorted({(r["method"], r["depth"]) for r in rows})
    for method, depth in series:
        pts = [r for r in rows if r["method"] == method and r["depth"] == depth
               and r["oosp_mean"] is not None]
        xs = [r[grid_name] for r in pts]
        ys = [r["oosp_mean"] for r in pts]
        es = [r["oosp_std"] or 0.0 for r in pts]
        ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3,
                    label=f"{method} d={depth}")
    ax.set_xlabel(grid_name)
    ax.set_ylabel("out-of-sample optimality")
    ax.set_ylim(0.0, 1.0)
    ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def bench_examples() -> tuple:
    """Re-check the two worked teaching fixtures; returns (lines, all_ok)."""
    lines, ok = [], True

    def check(label, passed, detail):
        nonlocal ok
        ok = ok and passed
        lines.append(f"{'PASS' if passed else 'FAIL'}  {label}: {detail}")

    ds1 = gen_confounded_binary(2000, seed=0, exact=True)
    scorer = exact.scorer_for("ipw", ds1, propensity=ds1.true_propensity)
    tree, total = exact.enumerate_trees(ds1.features, 1, scorer)
    est = total / ds1.n_rows
    check("example-1 weighting objective",
          tree.nodes.get(1) == ("branch", 0) and abs(est - 0.6) < 1e-9,
          f"branches on {ds1.feature_names[tree.nodes[1][1]]}, estimate {est:.3f} "
          "(expected x1, 0.600)")
    ktree, kest = exact.solve_kpt(ds1, 1)
    ktrue = evaluate(ktree, ds1).true_value
    check("example-1 baseline shortcut",
          ktree.nodes.get(1) == ("branch", 1) and abs(kest - 0.9) < 1e-9
          and abs(ktrue - 0.5) < 1e-9,
          f"branches on {ds1.feature_names[ktree.nodes[1][1]]}, estimate {kest:.3f} "
          f"but true value {ktrue:.3f}")

    ds2 = gen_confounded_graded(80)
    btree, bval = exact.brute_force_best_policy(ds2, 1)
    check("example-2 best policy",
          btree.nodes.get(1) == ("branch", 0) and abs(bval - 1.1) < 1e-9,
          f"branches on {ds2.feature_names[btree.nodes[1][1]]}, value {bval:.3f}")
    ktree2, kest2 = exact.solve_kpt(ds2, 1)
    ktrue2 = evaluate(ktree2, ds2).true_value
    check("example-2 baseline overestimate",
          ktree2.nodes.get(1) == ("branch", 1) and abs(kest2 - 1.4) < 1e-9
          and abs(ktrue2 - 1.0) < 1e-9,
          f"estimate {kest2:.3f}, true value {ktrue2:.3f}")
    picks = []
    for theta in (0.1, 0.5, 0.9):
        t, _ = exact.solve_bpt(ds2, 1, theta)
        picks.append(t.nodes.get(1) == ("branch", 1))
    check("example-2 blended baseline", all(picks),
          "prefers the low-variance split at theta in {0.1, 0.5, 0.9}")
    flat = gen_confounded_graded(80, shift=False)
    t, _ = exact.solve_bpt(flat, 1, 0.1)
    check("example-2 zero-variance variant", t.nodes.get(1) == ("branch", 0),
          "variance term vanishes, estimation term decides")
    return lines, ok


# -- command line -----------------------------------------------------------------


@click.group(help=__doc__)
@click.version_option(version=__version__, prog_name="prescribe-opt")
def main():
    pass


@main.command("synth-gen", help="Generate the two-covariate synthetic benchmark.")
@click.option("--n-train", default=500, show_default=True)
@click.option("--n-test", default=10000, show_default=True)
@click.option("--p", default=0.5, show_default=True,
              help="Probability the logged treatment is the better one.")
@click.option("--noise-sd", default=0.1, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
def synth_gen(n_train, n_test, p, noise_sd, seed, out):
    try:
        cfg = SyntheticConfig(n_train=n_train, n_test=n_test, p_correct=p,
                              noise_sd=noise_sd, seed=seed)
    except ValueError as exc:
        click.echo(f"config error: {exc}", err=True)
        raise SystemExit(EXIT_CONFIG)
    train, test = gen_synthetic(cfg)
    os.makedirs(out, exist_ok=True)
    for name, ds in (("train", train), ("test", test)):
        path = os.path.join(out, f"{name}.csv")
        write_csv(ds, path, schema_path=os.path.join(out, f"{name}.schema.json"))
        click.echo(path)


@main.command("warfarin-gen", help="Generate the warfarin dosing surrogate benchmark.")
@click.option("--n-train", default=1000, show_default=True)
@click.option("--n-test", default=1387, show_default=True)
@click.option("--r", default=0.0, show_default=True,
              help="Perturbation range of the dosing rule used for logging.")
@click.option("--noise-sd", default=0.02, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
def warfarin_gen(n_train, n_test, r, noise_sd, seed, out):
    try:
        cfg = WarfarinConfig(n_patients=n_train, n_test=n_test, perturb_range=r,
                             outcome_noise_sd=noise_sd, seed=seed)
    except ValueError as exc:
        click.echo(f"config error: {exc}", err=True)
        raise SystemExit(EXIT_CONFIG)
    train, test = gen_warfarin(cfg)
    os.makedirs(out, exist_ok=True)
    for name, ds in (("train", train), ("test", test)):
        path = os.path.join(out, f"{name}.csv")
        write_csv(ds, path, schema_path=os.path.join(out, f"{name}.schema.json"))
        click.echo(path)


@main.command("fit", help="Fit a nuisance model on a CSV dataset and save it.")
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--schema", type=click.Path(exists=True, dir_okay=False))
@click.option("--target", required=True, type=click.Choice(["propensity", "outcome"]))
@click.option("--kind", required=True,
              help="propensity: logistic|cart; outcome: linear|lasso|cart|forest")
@click.option("--max-depth", default=3, show_default=True)
@click.option("--alpha", default=0.08, show_default=True)
@click.option("--n-trees", default=50, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def fit_cmd(data, schema, target, kind, max_depth, alpha, n_trees, seed, out):
    ds = load_csv(data, _schema_for(data, schema))
    try:
        if target == "propensity":
            if kind == "true":
                raise ConfigError("true scores are data, not a fittable model")
            if kind not in _MU_KINDS:
                raise ConfigError(f"unknown propensity kind {kind!r}")
            model = PropensityModel(kind=_MU_KINDS[kind], max_depth=max_depth).fit(ds)
        else:
            if kind not in _NU_KINDS:
                raise ConfigError(f"unknown outcome kind {kind!r}")
            model = OutcomeModel(kind=_NU_KINDS[kind], alpha=alpha,
                                 max_depth=max_depth, n_trees=n_trees,
                                 seed=seed).fit(ds)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        raise SystemExit(EXIT_CONFIG)
    save_model(model, out)
    click.echo(out)


def _config_from_options(config, **overrides) -> ExperimentConfig:
    raw = {}
    if config:
        with open(config, encoding="utf-8") as fh:
            raw = json.load(fh)
    dataset = dict(raw.get("dataset", {}))
    for key in ("kind", "train", "test", "n_train", "n_test", "p", "r", "noise_sd"):
        val = overrides.pop(key, None)
        if val is not None:
            dataset[key] = val
    if dataset:
        raw["dataset"] = dataset
    ext = dict(raw.get("extensions") or {})
    for key in _EXTENSION_KEYS:
        val = overrides.pop(key, None)
        if val is not None and val != ():
            if key == "budgets":
                caps = {}
                for item in val:
                    arm, _, cap = item.partition("=")
                    caps[arm] = float(cap)
                ext[key] = caps
            elif key == "randomized":
                if val:
                    ext[key] = True
            else:
                ext[key] = val
    if ext:
        raw["extensions"] = ext
    seeds = overrides.pop("seeds", None)
    if seeds is not None:
        raw["seeds"] = [int(s) for s in seeds]
    for key, val in overrides.items():
        if val is not None:
            raw[key] = val
    return ExperimentConfig.from_dict(raw)


@main.command("train", help="Run an experiment from a JSON config and/or flags.")
@click.option("--config", type=click.Path(exists=True, dir_okay=False),
              help="JSON experiment config; flags override its fields.")
@click.option("--dataset", "kind", type=click.Choice(["synthetic", "warfarin", "csv"]))
@click.option("--train-csv", "train")
@click.option("--test-csv", "test")
@click.option("--n-train", type=int)
@click.option("--n-test", type=int)
@click.option("--p", type=float)
@click.option("--r", type=float)
@click.option("--noise-sd", type=float)
@click.option("--method", type=click.Choice(list(_METHODS)))
@click.option("--mu", "propensity", type=click.Choice(list(_MU_KINDS)))
@click.option("--nu", "outcome", type=click.Choice(list(_NU_KINDS)))
@click.option("--depth", type=int)
@click.option("--solver", type=click.Choice(["milp", "exact"]))
@click.option("--time-limit", "time_limit_s", type=float)
@click.option("--gap-tol", "gap_tol", type=float)
@click.option("--theta", type=float)
@click.option("--seeds", "seed_list", help="Comma-separated seed list, e.g. 0,1,2.")
@click.option("--out", "output_dir", type=click.Path(file_okay=False))
@click.option("--max-branches", "max_branches", type=int)
@click.option("--budget", "budgets", multiple=True,
              help="Treatment budget as k=cap; repeatable.")
@click.option("--parity-delta", "assignment_parity", type=float)
@click.option("--cond-parity-delta", "conditional_parity", type=float)
@click.option("--outcome-parity-delta", "outcome_parity", type=float)
@click.option("--randomized", is_flag=True, default=None)
def train_cmd(config, seed_list, **overrides):
    try:
        if seed_list is not None:
            overrides["seeds"] = tuple(int(s) for s in seed_list.split(","))
        cfg = _config_from_options(config, **overrides)
    except (ConfigError, ValueError, OSError, json.JSONDecodeError) as exc:
        click.echo(f"config error: {exc}", err=True)
        raise SystemExit(EXIT_CONFIG)
    summary = run_experiment(cfg)
    for row in summary["rows"]:
        status = row["error"] or f"objective {_fmt_cell(row['objective'])}"
        click.echo(f"seed {row['seed']}: {row['status']} {status}")
    for agg in summary["aggregates"]:
        cells = ", ".join(
            f"{c}={_fmt_cell(agg[c])}" for c in ("objective", "oosp", "gap")
            if agg[c] is not None
        )
        click.echo(f"{agg['seed']}: {cells}")
    if summary["paths"]:
        click.echo(f"wrote {summary['paths']['results']}")
    raise SystemExit(summary["exit_code"])


@main.command("eval", help="Evaluate a saved policy on a CSV with counterfactuals.")
@click.option("--policy", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--schema", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False))
def eval_cmd(policy, data, schema, out):
    tree = load_tree(policy)
    ds = load_csv(data, _schema_for(data, schema))
    if ds.counterfactuals is None:
        click.echo("config error: dataset has no counterfactual columns", err=True)
        raise SystemExit(EXIT_CONFIG)
    report = evaluate(tree, ds)
    doc = json.dumps(report.as_dict(), indent=2)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(doc + "\n")
    click.echo(doc)


@main.command("export-lp", help="Build a tree model over a CSV and write a CPLEX-LP file.")
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--schema", type=click.Path(exists=True, dir_okay=False))
@click.option("--method", required=True, type=click.Choice(["ipw", "dm", "dr", "kpt"]))
@click.option("--mu", type=click.Choice(list(_MU_KINDS)))
@click.option("--nu", type=click.Choice(list(_NU_KINDS)))
@click.option("--depth", default=1, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def export_lp_cmd(data, schema, method, mu, nu, depth, out):
    ds = load_csv(data, _schema_for(data, schema))
    try:
        cfg = ExperimentConfig(dataset={"kind": "csv", "train": data},
                               method=method, depth=depth, propensity=mu,
                               outcome=nu, seeds=(0,))
        mu_src, nu_src = _fit_nuisances(cfg, ds, 0)
    except (ConfigError, RuntimeError) as exc:
        click.echo(f"config error: {exc}", err=True)
        raise SystemExit(EXIT_CONFIG)
    fc = FormulationConfig(depth=depth)
    if method == "ipw":
        model, _ = build_ipw_model(ds, mu_src, fc)
    elif method == "dm":
        model, _ = build_dm_model(ds, nu_src, fc)
    elif method == "dr":
        model, _ = build_dr_model(ds, mu_src, nu_src, fc)
    else:
        model, _ = build_kpt_model(ds, fc)
    milp.export_lp(model, out)
    click.echo(out)


@main.command("bench", help="Run a benchmark suite at desk scale.")
@click.option("--suite", required=True,
              type=click.Choice(["examples", "synthetic", "warfarin"]))
@click.option("--out", type=click.Path(file_okay=False))
@click.option("--seeds", default=3, show_default=True)
@click.option("--depths", default="1", show_default=True)
@click.option("--train-size", type=int)
@click.option("--test-size", type=int)
@click.option("--methods", default=None,
              help="Comma list of tokens, e.g. kpt,ipw-true,dr-lr-true.")
@click.option("--p-grid", default="0.1,0.25,0.5,0.75,0.9", show_default=True)
@click.option("--r-grid", default="0.0,0.06,0.11", show_default=True)
@click.option("--solver", default="milp", type=click.Choice(["milp", "exact"]),
              show_default=True)
@click.option("--time-limit", default=3600.0, show_default=True)
def bench_cmd(suite, out, seeds, depths, train_size, test_size, methods,
              p_grid, r_grid, solver, time_limit):
    if suite == "examples":
        lines, ok = bench_examples()
        for line in lines:
            click.echo(line)
        raise SystemExit(EXIT_OK if ok else EXIT_PARTIAL)
    if not out:
        click.echo("config error: --out is required for grid suites", err=True)
        raise SystemExit(EXIT_CONFIG)
    try:
        depth_list = [int(d) for d in depths.split(",")]
        if suite == "synthetic":
            tokens = (methods or "kpt,ipw-true,dm-lr,dr-lr-true").split(",")
            grid = [float(v) for v in p_grid.split(",")]
            rows = _bench_grid(
                "synthetic", "p", grid, tokens, depth_list, seeds,
                train_size or 300, test_size or 5000, solver, time_limit,
            )
            grid_name = "p"
        else:
            tokens = (methods or "kpt,ipw-dt").split(",")
            grid = [float(v) for v in r_grid.split(",")]
            rows = _bench_grid(
                "warfarin", "r", grid, tokens, depth_list, seeds,
                train_size or 500, test_size or 1387, solver, time_limit,
            )
            grid_name = "r"
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        raise SystemExit(EXIT_CONFIG)
    os.makedirs(out, exist_ok=True)
    csv_path = os.path.join(out, f"{suite}.csv")
    _write_bench_csv(rows, csv_path, grid_name)
    _render_bench_figure(rows, os.path.join(out, f"{suite}.png"), grid_name)
    manifest = {
        "suite": suite, "methods": tokens, "depths": depth_list,
        "grid": grid, "seeds": seeds, "package_version": __version__,
    }
    with open(os.path.join(out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    failures = sum(r["failures"] for r in rows)
    click.echo(csv_path)
    raise SystemExit(EXIT_OK if failures == 0 else EXIT_PARTIAL)


if __name__ == "__main__":
    sys.exit(main())
