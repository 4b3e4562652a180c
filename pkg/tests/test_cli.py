"""
Tests for experiment configuration, the verify suites and the CLI.
"""

import csv
import json
import logging
from pathlib import Path

import pytest

from collapsecl.cli import formatter
from collapsecl.cli.commands import (
    EXIT_FAILED, EXIT_OK, EXIT_USAGE, ablation_cells, run_cli, summarize_reports,
)
from collapsecl.config import ExperimentConfig
from collapsecl.core.metrics import AccuracyMatrix
from collapsecl.core.stream import make_synthetic_stream, write_csv_stream
from collapsecl.errors import ConfigError, UsageError
from collapsecl.store.models import MetricsReport
from collapsecl.verify.suites import SUITES, SuiteRunner

from .conftest import tiny_config_doc


def _summary_rows(path):
    with open(path, encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def _report(seed, aa, forgetting, **settings):
    base = {"plasticity": "fnc2", "stability": "hsd", "pseudo_replay": True, "buffer": 0}
    base.update(settings)
    return MetricsReport(seed=seed, class_il=AccuracyMatrix.from_rows([[aa]]),
                         task_il=AccuracyMatrix.from_rows([[aa]]), average_accuracy=aa,
                         average_forgetting=forgetting, settings=base)


# ── Config tests ──

class TestExperimentConfig:
    def test_load_defaults(self, write_config):
        config = ExperimentConfig.load(write_config({"seeds": [1, 2], "stream": {}}))
        assert config.seeds == (1, 2)
        assert config.train.plasticity.tau == 0.5
        assert config.train.distill.kappa_past == 0.01
        assert config.train.distill.e0 == 30
        assert config.train.distill.epochs == config.train.epochs_later
        assert config.train.stability == "hsd"

    def test_e0_follows_epochs(self, write_config):
        config = ExperimentConfig.load(write_config(tiny_config_doc(train={"epochs_later": 10})))
        assert config.train.distill.e0 == 3
        assert config.train.distill.epochs == 10

    def test_round_trip(self, write_config):
        doc = tiny_config_doc(grid={"pseudo_replay": [False, True], "buffer_capacity": [0, 10]})
        config = ExperimentConfig.load(write_config(doc))
        assert ExperimentConfig._from_dict(config.to_dict()) == config

    def test_yaml(self, tmp_path):
        path = tmp_path / "config.yaml"
        path.write_text("seeds: [3]\nstream:\n  tasks: 2\nablation:\n  stability: ird\n", encoding="utf-8")
        config = ExperimentConfig.load(path)
        assert config.seeds == (3,)
        assert config.stream.tasks == 2
        assert config.train.stability == "ird"

    def test_missing_seeds(self, write_config):
        doc = tiny_config_doc()
        del doc["seeds"]
        with pytest.raises(ConfigError, match="seeds"):
            ExperimentConfig.load(write_config(doc))

    def test_unknown_key_names_line(self, write_config):
        doc = tiny_config_doc()
        doc["train"]["epochz"] = 3
        path = write_config(doc)
        expected = next(i for i, line in enumerate(path.read_text().splitlines(), start=1) if "epochz" in line)
        with pytest.raises(ConfigError) as exc:
            ExperimentConfig.load(path)
        assert exc.value.line == expected
        assert f"line {expected}" in str(exc.value)

    def test_incompatible_ablation(self, write_config):
        doc = tiny_config_doc(ablation={"plasticity_loss": "supcon-asym", "stability": "sprd"})
        with pytest.raises(ConfigError, match="supcon-asym") as exc:
            ExperimentConfig.load(write_config(doc))
        assert exc.value.field == "stability"

    def test_bad_temperature(self, write_config):
        with pytest.raises(ConfigError, match="tau"):
            ExperimentConfig.load(write_config(tiny_config_doc(plasticity={"tau": 0})))

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{\n  "seeds": [0],\n  "stream": {\n}', encoding="utf-8")
        with pytest.raises(ConfigError) as exc:
            ExperimentConfig.load(path)
        assert exc.value.line is not None

    def test_csv_stream_relative_to_config(self, tmp_path):
        write_csv_stream(make_synthetic_stream(2, 2, 5, 3, 0.1, seed=0), tmp_path / "data" / "s.csv")
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"seeds": [0], "stream": {"csv_path": "data/s.csv"}}), encoding="utf-8")
        stream = ExperimentConfig.load(path).stream.build(0, ExperimentConfig.load(path).base_dir)
        assert stream.class_sets == [(0, 1), (2, 3)]

    def test_with_cell(self, write_config):
        config = ExperimentConfig.load(write_config(tiny_config_doc()))
        variant = config.with_cell({"pseudo_replay": False, "buffer_capacity": 20})
        assert variant.train.settings == {"plasticity": "fnc2", "stability": "hsd",
                                          "pseudo_replay": False, "buffer": 20}
        with pytest.raises(ConfigError):
            config.with_cell({"lr": 0.1})


# ── Ablation grid tests ──

class TestAblationCells:
    def test_cross_product(self, write_config):
        doc = tiny_config_doc(grid={"pseudo_replay": [False, True], "buffer_capacity": [0, 10]})
        cells = ablation_cells(ExperimentConfig.load(write_config(doc)))
        assert len(cells) == 4
        assert {(c["pseudo_replay"], c["buffer_capacity"]) for c in cells} == {
            (False, 0), (False, 10), (True, 0), (True, 10)}

    def test_duplicates_dropped(self, write_config, caplog):
        doc = tiny_config_doc(grid={"cells": [{"stability": "ird"}, {"stability": "ird"}, {"stability": "none"}]})
        with caplog.at_level(logging.WARNING):
            cells = ablation_cells(ExperimentConfig.load(write_config(doc)))
        assert cells == [{"stability": "ird"}, {"stability": "none"}]
        assert "duplicate_cell_dropped" in caplog.text

    def test_empty_grid(self, write_config):
        with pytest.raises(ConfigError, match="empty"):
            ablation_cells(ExperimentConfig.load(write_config(tiny_config_doc())))


class TestSummaries:
    def test_mean_and_population_std(self):
        row = summarize_reports([_report(0, 0.5, 0.1), _report(1, 0.7, 0.3)])
        assert row.aa_mean == pytest.approx(0.6)
        assert row.aa_std == pytest.approx(0.1)
        assert row.f_mean == pytest.approx(0.2)
        assert row.n_seeds == 2

    def test_single_task_has_no_forgetting(self):
        row = summarize_reports([_report(0, 0.9, None)])
        assert row.f_mean is None
        assert "-" in formatter.format_summary([row])

    def test_no_reports(self):
        with pytest.raises(UsageError):
            summarize_reports([])


# ── Verify tests ──

class TestSuites:
    def test_etf_suite_passes(self):
        results = SuiteRunner(seed=0).run("etf")
        assert [r.name for r in results] == ["etf-k2", "etf-k3", "etf-k10", "etf-k50"]
        assert all(r.passed for r in results)

    def test_grad_suite_passes(self):
        results = SuiteRunner(seed=1).run("grad")
        failed = [(r.name, r.max_error) for r in results if not r.passed]
        assert not failed

    def test_metrics_suite_passes(self):
        assert all(r.passed for r in SuiteRunner(seed=2).run("metrics"))

    @pytest.mark.slow
    def test_reservoir_suite_passes(self):
        results = SuiteRunner(seed=0).run("reservoir")
        assert [r.name for r in results] == ["reservoir-retention", "reservoir-insert"]
        assert all(r.passed for r in results)

    def test_unknown_suite(self):
        with pytest.raises(UsageError):
            SuiteRunner().run("bogus")

    def test_suite_names(self):
        assert SUITES == ("etf", "grad", "reservoir", "metrics")


# ── CLI tests ──

class TestCli:
    def test_verify_etf(self, capsys):
        assert run_cli(["verify", "--suite", "etf"]) == EXIT_OK
        assert "4/4 checks passed" in capsys.readouterr().out

    def test_verify_unknown_suite(self, capsys):
        assert run_cli(["verify", "--suite", "bogus"]) == EXIT_USAGE
        assert "unknown suite" in capsys.readouterr().err

    def test_no_command(self):
        assert run_cli([]) == EXIT_USAGE

    def test_run_writes_reports(self, write_config, tmp_path, capsys):
        out = tmp_path / "out"
        path = write_config(tiny_config_doc(seeds=[0, 1, 2]))
        assert run_cli(["run", "--config", str(path), "--out", str(out)]) == EXIT_OK
        for seed in (0, 1, 2):
            assert (out / f"report_{seed}.json").exists()
            assert (out / f"losses_{seed}.csv").exists()
            assert (out / f"accuracy_{seed}.csv").exists()
        rows = _summary_rows(out / "summary.csv")
        assert len(rows) == 1
        assert rows[0]["n_seeds"] == "3"
        assert rows[0]["pseudo_replay"] == "on"
        assert "AA=" in capsys.readouterr().out

    def test_losses_csv_columns(self, write_config, tmp_path):
        out = tmp_path / "out"
        run_cli(["run", "--config", str(write_config(tiny_config_doc())), "--out", str(out)])
        with open(out / "losses_0.csv", encoding="utf-8", newline="") as f:
            rows = list(csv.DictReader(f))
        assert list(rows[0]) == ["epoch", "task", "fnc2", "ird", "sprd", "alpha"]
        assert len(rows) == 4  # 2 tasks x 2 epochs

    def test_runs_are_reproducible(self, write_config, tmp_path):
        path = write_config(tiny_config_doc())
        run_cli(["run", "--config", str(path), "--out", str(tmp_path / "a")])
        run_cli(["run", "--config", str(path), "--out", str(tmp_path / "b")])
        first = (tmp_path / "a" / "report_0.json").read_bytes()
        assert first == (tmp_path / "b" / "report_0.json").read_bytes()

    def test_seed_override(self, write_config, tmp_path):
        out = tmp_path / "out"
        path = write_config(tiny_config_doc())
        assert run_cli(["run", "--config", str(path), "--out", str(out), "--seeds", "5"]) == EXIT_OK
        assert [p.name for p in out.glob("report_*.json")] == ["report_5.json"]

    def test_bad_seed_list(self, write_config, tmp_path):
        path = write_config(tiny_config_doc())
        assert run_cli(["run", "--config", str(path), "--seeds", "a,b"]) == EXIT_USAGE

    def test_invalid_config_exit_code(self, write_config, tmp_path, capsys):
        doc = tiny_config_doc(ablation={"plasticity_loss": "supcon-asym", "stability": "hsd"})
        path = write_config(doc)
        assert run_cli(["run", "--config", str(path), "--out", str(tmp_path / "out")]) == EXIT_FAILED
        err = capsys.readouterr().err
        assert "invalid config" in err
        assert "supcon-asym" in err
        assert not (tmp_path / "out").exists()

    def test_missing_field_exit_code(self, write_config, capsys):
        doc = tiny_config_doc()
        del doc["stream"]
        assert run_cli(["run", "--config", str(write_config(doc))]) == EXIT_FAILED
        assert "stream" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert run_cli(["run", "--config", str(tmp_path / "nope.json")]) == EXIT_FAILED

    def test_relations_flag(self, write_config, tmp_path):
        rel = tmp_path / "rel"
        path = write_config(tiny_config_doc())
        run_cli(["run", "--config", str(path), "--out", str(tmp_path / "out"), "--dump-relations", str(rel)])
        assert (rel / "seed0" / "relations_task2_r.csv").exists()

    def test_ablate(self, write_config, tmp_path, capsys):
        out = tmp_path / "out"
        doc = tiny_config_doc(grid={"pseudo_replay": [False, True], "buffer_capacity": [0, 10]})
        assert run_cli(["ablate", "--config", str(write_config(doc)), "--out", str(out)]) == EXIT_OK
        rows = _summary_rows(out / "summary.csv")
        assert [(r["pseudo_replay"], r["buffer"]) for r in rows] == [
            ("off", "0"), ("off", "10"), ("on", "0"), ("on", "10")]
        assert (out / "fnc2_hsd_replay-on_buffer10" / "report_0.json").exists()

    def test_ablate_grid_file(self, write_config, tmp_path):
        out = tmp_path / "out"
        config = write_config(tiny_config_doc())
        grid = write_config({"grid": {"stability": ["ird", "sprd"]}}, name="grid.json")
        assert run_cli(["ablate", "--config", str(config), "--grid", str(grid), "--out", str(out)]) == EXIT_OK
        assert [r["stability"] for r in _summary_rows(out / "summary.csv")] == ["ird", "sprd"]

    def test_ablate_empty_grid(self, write_config, capsys):
        assert run_cli(["ablate", "--config", str(write_config(tiny_config_doc()))]) == EXIT_FAILED
        assert "grid is empty" in capsys.readouterr().err

    def test_report_rebuilds_summary(self, write_config, tmp_path):
        out = tmp_path / "out"
        run_cli(["run", "--config", str(write_config(tiny_config_doc(seeds=[0, 1]))), "--out", str(out)])
        before = (out / "summary.csv").read_text(encoding="utf-8")
        (out / "summary.csv").unlink()
        assert run_cli(["report", "--out", str(out)]) == EXIT_OK
        assert (out / "summary.csv").read_text(encoding="utf-8") == before

    def test_report_prints_a_copied_summary(self, write_config, tmp_path, capsys):
        out, copied = tmp_path / "out", tmp_path / "copied"
        run_cli(["run", "--config", str(write_config(tiny_config_doc(seeds=[0, 1]))), "--out", str(out)])
        copied.mkdir()
        text = (out / "summary.csv").read_text(encoding="utf-8")
        (copied / "summary.csv").write_text(text, encoding="utf-8")
        capsys.readouterr()
        assert run_cli(["report", "--out", str(copied)]) == EXIT_OK
        printed = capsys.readouterr().out
        assert "fnc2" in printed
        assert printed.strip().splitlines()[-1].endswith("2")
        assert (copied / "summary.csv").read_text(encoding="utf-8") == text

    def test_report_final_losses(self, write_config, tmp_path, capsys):
        out = tmp_path / "out"
        run_cli(["run", "--config", str(write_config(tiny_config_doc())), "--out", str(out)])
        capsys.readouterr()
        assert run_cli(["report", "--out", str(out), "--losses"]) == EXIT_OK
        printed = capsys.readouterr().out
        assert "losses_0.csv" in printed
        assert "T1   epoch    2" in printed
        assert "T2   epoch    2" in printed

    def test_report_without_results(self, tmp_path):
        assert run_cli(["report", "--out", str(tmp_path)]) == EXIT_USAGE

    @pytest.mark.slow
    def test_workers_match_sequential(self, write_config, tmp_path):
        path = write_config(tiny_config_doc(seeds=[0, 1]))
        run_cli(["run", "--config", str(path), "--out", str(tmp_path / "seq")])
        run_cli(["run", "--config", str(path), "--out", str(tmp_path / "par"), "--workers", "2"])
        for seed in (0, 1):
            name = f"report_{seed}.json"
            assert (tmp_path / "seq" / name).read_bytes() == (tmp_path / "par" / name).read_bytes()


# ── Shipped config tests ──

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


class TestShippedConfigs:
    @pytest.mark.parametrize("name", ["quickstart.json", "ablation_components.json",
                                      "ablation_memory.json", "nc_emergence.yaml"])
    def test_loads(self, name):
        config = ExperimentConfig.load(CONFIG_DIR / name)
        assert config.seeds

    @pytest.mark.parametrize("name", ["ablation_components.json", "ablation_memory.json"])
    def test_ablations_classify_by_nearest_prototype(self, name):
        assert ExperimentConfig.load(CONFIG_DIR / name).train.classifier_mode == "nc4"

    @pytest.mark.parametrize("name,cells", [("ablation_components.json", 6), ("ablation_memory.json", 4)])
    def test_grid_size(self, name, cells):
        config = ExperimentConfig.load(CONFIG_DIR / name)
        expanded = ablation_cells(config)
        assert len(expanded) == cells
        for cell in expanded:
            config.with_cell(cell)
