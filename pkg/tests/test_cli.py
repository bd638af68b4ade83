"""Tests for the experiment harness and command line surface."""

import csv
import json
import os

import numpy as np
import pytest
from click.testing import CliRunner

from prescribe_opt.cli import (
    ConfigError,
    ExperimentConfig,
    bench_examples,
    learn_tree,
    main,
    parse_method_token,
    run_experiment,
)
from prescribe_opt.data import SyntheticConfig, gen_synthetic, load_csv
from prescribe_opt.milp import import_lp


def _synth_cfg(**over):
    base = {
        "dataset": {"kind": "synthetic", "n_train": 60, "n_test": 300, "p": 0.75},
        "method": "dr",
        "propensity": "true",
        "outcome": "linear",
        "depth": 1,
        "solver": "exact",
        "seeds": (0, 1),
    }
    base.update(over)
    return ExperimentConfig.from_dict(base)


class TestConfigValidation:
    def test_valid_config_round_trips(self):
        cfg = _synth_cfg()
        assert cfg.method == "dr"
        assert cfg.seeds == (0, 1)

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            _synth_cfg(notakey=1)

    def test_method_needs_its_models(self):
        with pytest.raises(ConfigError, match="needs a propensity"):
            _synth_cfg(method="ipw", propensity=None, outcome=None)
        with pytest.raises(ConfigError, match="needs an outcome"):
            _synth_cfg(method="dm", propensity=None, outcome=None)
        with pytest.raises(ConfigError, match="needs a propensity"):
            _synth_cfg(method="dr", propensity=None)

    def test_superfluous_models_rejected(self):
        with pytest.raises(ConfigError, match="takes no outcome"):
            _synth_cfg(method="ipw", outcome="linear")
        with pytest.raises(ConfigError, match="takes no propensity"):
            _synth_cfg(method="kpt", outcome=None)

    def test_baselines_take_no_models(self):
        cfg = _synth_cfg(method="kpt", propensity=None, outcome=None)
        assert cfg.propensity is None and cfg.outcome is None

    def test_bpt_requires_enumeration(self):
        with pytest.raises(ConfigError, match="enumeration"):
            _synth_cfg(method="bpt", propensity=None, outcome=None, solver="milp")

    def test_extensions_gated_by_method_and_solver(self):
        with pytest.raises(ConfigError, match="dm or dr"):
            _synth_cfg(method="kpt", propensity=None, outcome=None,
                       solver="milp", extensions={"max_branches": 1})
        with pytest.raises(ConfigError, match="milp"):
            _synth_cfg(extensions={"max_branches": 1})
        with pytest.raises(ConfigError, match="unknown extensions"):
            _synth_cfg(solver="milp", extensions={"frobnicate": 1})

    def test_bad_dataset_parameters_caught_early(self):
        with pytest.raises(ConfigError, match="dataset"):
            _synth_cfg(dataset={"kind": "synthetic", "p": 1.5})
        with pytest.raises(ConfigError, match="dataset"):
            _synth_cfg(dataset={"kind": "nosuch"})
        with pytest.raises(ConfigError, match="train"):
            _synth_cfg(dataset={"kind": "csv"})

    def test_bounds_checked(self):
        with pytest.raises(ConfigError):
            _synth_cfg(theta=1.5)
        with pytest.raises(ConfigError):
            _synth_cfg(depth=-1)
        with pytest.raises(ConfigError):
            _synth_cfg(seeds=())
        with pytest.raises(ConfigError):
            _synth_cfg(method="kpt", propensity=None, outcome=None, depth=0)


class TestMethodTokens:
    @pytest.mark.parametrize(
        "token,expect",
        [
            ("kpt", {"method": "kpt", "propensity": None, "outcome": None}),
            ("bpt", {"method": "bpt", "propensity": None, "outcome": None}),
            ("ipw-true", {"method": "ipw", "propensity": "true", "outcome": None}),
            ("ipw-dt", {"method": "ipw", "propensity": "cart", "outcome": None}),
            ("dm-lasso", {"method": "dm", "propensity": None, "outcome": "lasso"}),
            ("dm-rf", {"method": "dm", "propensity": None, "outcome": "forest"}),
            ("dr-lr-true", {"method": "dr", "propensity": "true", "outcome": "linear"}),
            ("dr-lasso-dt", {"method": "dr", "propensity": "cart", "outcome": "lasso"}),
        ],
    )
    def test_valid_tokens(self, token, expect):
        assert parse_method_token(token) == expect

    @pytest.mark.parametrize("token", ["", "xgb", "ipw", "dr-lr", "kpt-true", "dm-true"])
    def test_invalid_tokens(self, token):
        with pytest.raises(ConfigError):
            parse_method_token(token)


class TestLearnTree:
    def test_solvers_agree(self):
        train, _ = gen_synthetic(SyntheticConfig(n_train=50, n_test=10, seed=4))
        nu = np.random.default_rng(0).normal(size=(50, 2))
        t1, i1 = learn_tree(train, "dm", 1, outcome=nu, solver="exact")
        t2, i2 = learn_tree(train, "dm", 1, outcome=nu, solver="milp")
        assert i1["objective"] == pytest.approx(i2["objective"], abs=1e-8)

    def test_extensions_rejected_on_exact_path(self):
        train, _ = gen_synthetic(SyntheticConfig(n_train=30, n_test=10, seed=4))
        nu = np.zeros((30, 2))
        with pytest.raises(ConfigError, match="milp"):
            learn_tree(train, "dm", 1, outcome=nu, solver="exact",
                       extensions={"max_branches": 1})


class TestRunExperiment:
    def test_rows_aggregates_and_artifacts(self, tmp_path):
        cfg = _synth_cfg(output_dir=str(tmp_path / "run"))
        summary = run_experiment(cfg)
        assert summary["exit_code"] == 0
        rows = summary["rows"]
        assert [r["seed"] for r in rows] == [0, 1]
        assert all(r["status"] == "optimal" for r in rows)
        out = tmp_path / "run"
        for name in ("results.csv", "results.png", "manifest.json",
                     "policy_seed0.json", "policy_seed1.json",
                     "solve_seed0.json", "solve_seed1.json"):
            assert (out / name).exists(), name

    def test_aggregates_recompute(self, tmp_path):
        cfg = _synth_cfg(seeds=(0, 1, 2), output_dir=str(tmp_path / "run"))
        summary = run_experiment(cfg)
        with open(tmp_path / "run" / "results.csv") as fh:
            table = list(csv.DictReader(fh))
        seed_rows = [r for r in table if r["seed"] not in ("mean", "std")]
        mean_row = next(r for r in table if r["seed"] == "mean")
        std_row = next(r for r in table if r["seed"] == "std")
        # aggregates are computed from unrounded values, the seed cells are
        # printed at 10 significant digits, so recomputing the (small) std
        # from re-parsed cells only matches to the input rounding error
        for col in ("objective", "oosp"):
            vals = [float(r[col]) for r in seed_rows]
            assert float(mean_row[col]) == pytest.approx(np.mean(vals), rel=1e-9)
            assert float(std_row[col]) == pytest.approx(
                np.std(vals, ddof=1), rel=1e-6, abs=1e-9
            )

    def test_per_seed_errors_do_not_stop_the_run(self, tmp_path):
        # true scores are unavailable for perturbed warfarin logging
        cfg = ExperimentConfig.from_dict({
            "dataset": {"kind": "warfarin", "n_train": 120, "n_test": 60,
                        "r": 0.06},
            "method": "ipw", "propensity": "true", "depth": 1,
            "solver": "exact", "seeds": (0, 1),
            "output_dir": str(tmp_path / "run"),
        })
        summary = run_experiment(cfg)
        assert summary["exit_code"] == 4
        assert all(r["status"] == "error" for r in summary["rows"])
        assert all("true propensity" in r["error"] for r in summary["rows"])
        assert (tmp_path / "run" / "results.csv").exists()

    def test_worker_pool_matches_serial(self, tmp_path, monkeypatch):
        cfg = _synth_cfg(seeds=(0, 1, 2))
        serial = run_experiment(cfg)
        monkeypatch.setenv("PRESCRIBE_OPT_THREADS", "3")
        pooled = run_experiment(cfg)
        assert pooled["rows"] == serial["rows"]


class TestCommandLine:
    def setup_method(self):
        self.runner = CliRunner()

    def _train_args(self, out, solver="exact"):
        return ["train", "--dataset", "synthetic", "--n-train", "60",
                "--n-test", "200", "--p", "0.75", "--method", "dr",
                "--mu", "true", "--nu", "linear", "--depth", "1",
                "--solver", solver, "--seeds", "0,1", "--out", out]

    def test_train_reproducible_byte_identical(self, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        r1 = self.runner.invoke(main, self._train_args(a))
        r2 = self.runner.invoke(main, self._train_args(b))
        assert r1.exit_code == 0 and r2.exit_code == 0
        with open(os.path.join(a, "results.csv"), "rb") as fh:
            bytes_a = fh.read()
        with open(os.path.join(b, "results.csv"), "rb") as fh:
            bytes_b = fh.read()
        assert bytes_a == bytes_b

    def test_config_file_and_flag_override(self, tmp_path):
        cfg = {
            "dataset": {"kind": "synthetic", "n_train": 40, "n_test": 100},
            "method": "kpt", "depth": 1, "solver": "exact", "seeds": [0],
        }
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        out = str(tmp_path / "run")
        res = self.runner.invoke(
            main, ["train", "--config", str(path), "--out", out]
        )
        assert res.exit_code == 0, res.output
        assert os.path.exists(os.path.join(out, "results.csv"))

    def test_invalid_pairing_exits_2_before_work(self, tmp_path):
        res = self.runner.invoke(
            main,
            ["train", "--dataset", "synthetic", "--method", "ipw",
             "--nu", "linear", "--seeds", "0", "--out", str(tmp_path / "x")],
        )
        assert res.exit_code == 2
        assert "config error" in res.output
        assert not os.path.exists(tmp_path / "x")

    def test_infeasible_budgets_exit_3(self, tmp_path):
        cfg = {
            "dataset": {"kind": "synthetic", "n_train": 30, "n_test": 50},
            "method": "dm", "outcome": "linear", "depth": 1,
            "solver": "milp",
            "extensions": {"budgets": {"0": 0.0, "1": 0.0}},
            "seeds": [0],
        }
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        res = self.runner.invoke(main, ["train", "--config", str(path)])
        assert res.exit_code == 3, res.output

    def test_generate_fit_export_eval_pipeline(self, tmp_path):
        gen = str(tmp_path / "data")
        res = self.runner.invoke(
            main, ["synth-gen", "--n-train", "50", "--n-test", "150",
                   "--p", "0.7", "--seed", "3", "--out", gen],
        )
        assert res.exit_code == 0, res.output
        train_csv = os.path.join(gen, "train.csv")
        assert load_csv(
            train_csv, json.load(open(os.path.join(gen, "train.schema.json")))
        ).n_rows == 50

        model_path = str(tmp_path / "nu.json")
        res = self.runner.invoke(
            main, ["fit", "--data", train_csv, "--target", "outcome",
                   "--kind", "lasso", "--out", model_path],
        )
        assert res.exit_code == 0, res.output
        assert json.load(open(model_path))["model_class"] == "OutcomeModel"

        lp_path = str(tmp_path / "model.lp")
        res = self.runner.invoke(
            main, ["export-lp", "--data", train_csv, "--method", "dr",
                   "--mu", "logistic", "--nu", "lasso", "--depth", "1",
                   "--out", lp_path],
        )
        assert res.exit_code == 0, res.output
        model = import_lp(lp_path)
        assert len(model.variables) > 0

        out = str(tmp_path / "run")
        res = self.runner.invoke(
            main, ["train", "--dataset", "csv", "--train-csv", train_csv,
                   "--test-csv", os.path.join(gen, "test.csv"),
                   "--method", "kpt", "--depth", "1", "--solver", "exact",
                   "--seeds", "0", "--out", out],
        )
        assert res.exit_code == 0, res.output
        res = self.runner.invoke(
            main, ["eval", "--policy", os.path.join(out, "policy_seed0.json"),
                   "--data", os.path.join(gen, "test.csv")],
        )
        assert res.exit_code == 0, res.output
        report = json.loads(res.output)
        assert 0.0 <= report["oosp"] <= 1.0
        assert report["n_rows"] == 150

    def test_warfarin_gen_round_trip(self, tmp_path):
        gen = str(tmp_path / "warf")
        res = self.runner.invoke(
            main, ["warfarin-gen", "--n-train", "150", "--n-test", "80",
                   "--r", "0.06", "--seed", "1", "--out", gen],
        )
        assert res.exit_code == 0, res.output
        ds = load_csv(
            os.path.join(gen, "train.csv"),
            json.load(open(os.path.join(gen, "train.schema.json"))),
        )
        assert ds.n_rows == 150
        assert ds.n_treatments == 3

    def test_bench_examples_passes(self):
        res = self.runner.invoke(main, ["bench", "--suite", "examples"])
        assert res.exit_code == 0, res.output
        assert res.output.count("PASS") == 6
        assert "FAIL" not in res.output

    def test_bench_synthetic_grid_writes_csv_and_figure(self, tmp_path):
        out = str(tmp_path / "bench")
        res = self.runner.invoke(
            main, ["bench", "--suite", "synthetic", "--out", out,
                   "--seeds", "1", "--train-size", "40", "--test-size", "100",
                   "--methods", "kpt,dm-lr", "--p-grid", "0.5",
                   "--solver", "exact"],
        )
        assert res.exit_code == 0, res.output
        assert os.path.exists(os.path.join(out, "synthetic.csv"))
        assert os.path.exists(os.path.join(out, "synthetic.png"))
        with open(os.path.join(out, "synthetic.csv")) as fh:
            rows = list(csv.DictReader(fh))
        assert {r["method"] for r in rows} == {"kpt", "dm-lr"}
        assert all(r["failures"] == "0" for r in rows)

    def test_bench_grid_without_out_exits_2(self):
        res = self.runner.invoke(main, ["bench", "--suite", "synthetic"])
        assert res.exit_code == 2


def test_bench_examples_library_entry():
    lines, ok = bench_examples()
    assert ok
    assert len(lines) == 6
    assert all(line.startswith("PASS") for line in lines)
