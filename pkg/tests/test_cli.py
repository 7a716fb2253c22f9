"""End-to-end CLI pipeline on a miniature configuration."""

import json

import numpy as np
import pytest

from ennbench.cli import main

MICRO_CONFIG = {
    "seed": 0,
    "data": {"classes": 10, "in_dist_classes": [0, 1, 2, 3, 4, 5, 6],
             "n_train": 240, "n_val": 64, "n_test": 64},
    "shift": {"types": ["gaussian_noise", "contrast"]},
    "models": {"widths": [1], "ensemble_pool": 2, "ensemble_sizes": [1, 2],
               "epinet": {"index_dim": 2, "hidden": [8]}},
    "train": {"epochs_base": 2, "epochs_epinet": 1, "batch_size": 32},
    "eval": {"n_index": 8, "dyadic_tau": 3, "dyadic_batches": 16},
}


@pytest.fixture
def workdir(tmp_path):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(MICRO_CONFIG))
    return tmp_path, str(cfg_path), str(tmp_path / "run")


def run(cfg_path, out, *argv):
    return main([argv[0], "--config", cfg_path, "--out", out, *argv[1:]])


def run_pipeline(cfg_path, out):
    assert run(cfg_path, out, "make-shifts") == 0
    assert run(cfg_path, out, "train-base") == 0
    assert run(cfg_path, out, "train-ensemble") == 0
    assert run(cfg_path, out, "make-shifts") == 0  # attaches adversarial split
    assert run(cfg_path, out, "train-epinet") == 0
    assert run(cfg_path, out, "evaluate") == 0


class TestConfig:
    def test_unknown_key_reports_path(self, workdir, capsys):
        tmp_path, _, out = workdir
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"train": {"lr": 0.1}}))
        assert main(["train-base", "--config", str(bad), "--out", out]) == 1
        assert "config-error" in capsys.readouterr().err

    def test_validation_error_names_field(self, workdir, capsys):
        tmp_path, _, out = workdir
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"eval": {"dyadic_tau": 1}}))
        assert main(["evaluate", "--config", str(bad), "--out", out]) == 1
        assert "eval.dyadic_tau" in capsys.readouterr().err

    def test_resolved_config_echoed(self, workdir):
        tmp_path, cfg_path, out = workdir
        run(cfg_path, out, "make-shifts")
        resolved = json.loads((tmp_path / "run" / "config.resolved.json").read_text())
        assert resolved["data"]["classes"] == 10
        assert resolved["train"]["epochs_base"] == 2


class TestMakeShifts:
    def test_grid_has_five_severities_per_type(self, workdir):
        tmp_path, cfg_path, out = workdir
        assert run(cfg_path, out, "make-shifts") == 0
        manifest = json.loads((tmp_path / "run" / "shifts" / "manifest.json").read_text())
        names = [d["name"] for d in manifest["datasets"]]
        for ctype in ("gaussian_noise", "contrast"):
            assert sum(1 for n in names if n.startswith(f"corrupt:{ctype}:")) == 5
        assert manifest["adversarial"] == "pending-reference"

    def test_rerun_is_digest_identical(self, workdir):
        tmp_path, cfg_path, out = workdir
        run(cfg_path, out, "make-shifts")
        first = (tmp_path / "run" / "shifts" / "manifest.json").read_bytes()
        run(cfg_path, out, "make-shifts")
        assert (tmp_path / "run" / "shifts" / "manifest.json").read_bytes() == first

    def test_require_mode_errors_without_reference(self, workdir, capsys):
        tmp_path, _, out = workdir
        cfg = json.loads(json.dumps(MICRO_CONFIG))
        cfg["shift"]["adversarial"] = "require"
        cfg_path = tmp_path / "req.json"
        cfg_path.write_text(json.dumps(cfg))
        assert main(["make-shifts", "--config", str(cfg_path), "--out", out]) == 1
        err = capsys.readouterr().err
        assert err.startswith("missing-artifact:") and "train-ensemble" in err


class TestTraining:
    def test_missing_base_blocks_epinet(self, workdir, capsys):
        _, cfg_path, out = workdir
        assert run(cfg_path, out, "train-epinet") == 1
        assert "missing-artifact" in capsys.readouterr().err

    def test_rerun_skips_completed_checkpoints(self, workdir, capsys):
        tmp_path, cfg_path, out = workdir
        run(cfg_path, out, "train-base")
        ck = tmp_path / "run" / "checkpoints" / "base_w1.ennck"
        first = ck.read_bytes()
        run(cfg_path, out, "train-base")
        assert "skipping" in capsys.readouterr().out
        assert ck.read_bytes() == first

    def test_parallel_member_training_matches_serial(self, workdir):
        tmp_path, cfg_path, out = workdir
        run(cfg_path, out, "train-ensemble")
        serial = [(tmp_path / "run" / "checkpoints" / f"member_{i:02d}.ennck").read_bytes()
                  for i in range(2)]
        out2 = str(tmp_path / "run2")
        assert main(["train-ensemble", "--config", cfg_path, "--out", out2, "--jobs", "2"]) == 0
        parallel = [(tmp_path / "run2" / "checkpoints" / f"member_{i:02d}.ennck").read_bytes()
                    for i in range(2)]
        assert serial == parallel


class TestEvaluate:
    def test_missing_artifacts_error(self, workdir, capsys):
        _, cfg_path, out = workdir
        run(cfg_path, out, "make-shifts")
        assert run(cfg_path, out, "evaluate") == 1
        assert "missing-artifact" in capsys.readouterr().err

    def test_full_pipeline_produces_expected_rows(self, workdir):
        tmp_path, cfg_path, out = workdir
        run_pipeline(cfg_path, out)
        csv_text = (tmp_path / "run" / "reports" / "metrics.csv").read_text()
        lines = csv_text.splitlines()
        assert lines[0].startswith("model,model_size_params,dataset")
        models = {line.split(",")[0] for line in lines[1:]}
        assert models == {"base_w1", "epinet_w1", "ensemble_k1", "ensemble_k2"}
        assert any(",ood,,,aupr," in line for line in lines)
        assert any(",corruption-grid,,,mce," in line for line in lines)
        assert any(",adversarial,,," in line for line in lines)
        summary = (tmp_path / "run" / "reports" / "metrics_summary.txt").read_text()
        assert "epistemic-index sampling" in summary

    def test_reference_member_mce_is_exactly_one(self, workdir):
        tmp_path, cfg_path, out = workdir
        run_pipeline(cfg_path, out)
        import csv as csvmod

        with open(tmp_path / "run" / "reports" / "metrics.csv") as fh:
            rows = list(csvmod.DictReader(fh))
        mce_k1 = [r for r in rows if r["model"] == "ensemble_k1" and r["metric"] == "mce"]
        assert float(mce_k1[0]["value"]) == 1.0

    def test_rerun_evaluate_is_byte_identical(self, workdir):
        tmp_path, cfg_path, out = workdir
        run_pipeline(cfg_path, out)
        path = tmp_path / "run" / "reports" / "metrics.csv"
        first = path.read_bytes()
        assert run(cfg_path, out, "evaluate") == 0
        assert path.read_bytes() == first


class TestTemperatureCommands:
    def test_tune_and_report(self, workdir):
        tmp_path, cfg_path, out = workdir
        run_pipeline(cfg_path, out)
        assert run(cfg_path, out, "tune-temp") == 0
        temps = json.loads((tmp_path / "run" / "reports" / "temperatures.json").read_text())
        assert set(temps) == {"base_w1", "epinet_w1", "ensemble_k1", "ensemble_k2"}
        assert all(t["value"] > 0 for t in temps.values())
        assert run(cfg_path, out, "temp-report") == 0
        import csv as csvmod

        with open(tmp_path / "run" / "reports" / "ratios.csv") as fh:
            rows = list(csvmod.DictReader(fh))
        acc_ratios = [float(r["value"]) for r in rows
                      if r["metric"] == "ratio:accuracy" and r["value"]]
        assert acc_ratios and all(v == 1.0 for v in acc_ratios)
        mce_ratios = [float(r["value"]) for r in rows if r["metric"] == "ratio:mce"]
        assert mce_ratios and all(v == 1.0 for v in mce_ratios)
        for r in rows:  # tuned temperature recorded on every row
            assert float(r["temperature"]) > 0
