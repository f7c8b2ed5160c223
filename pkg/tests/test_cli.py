"""End-to-end contracts of the se2gnn command line: exit codes, JSON shapes,
schema validity, config precedence, and idempotent regeneration."""

import contextlib
import io
import json
import subprocess
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from se2gnn import cli, data, model, sim


def run_cli(argv, env=None, monkeypatch=None):
    """Invoke the CLI in-process; returns (exit_code, stdout, stderr)."""
    if env:
        assert monkeypatch is not None
        for key, value in env.items():
            monkeypatch.setenv(key, value)
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        try:
            code = cli.main([str(a) for a in argv])
        except SystemExit as exc:  # argparse usage failures
            code = exc.code
    return code, out.getvalue(), err.getvalue()


def load_schema(name):
    path = resources.files("se2gnn") / "schemas" / name
    return json.loads(path.read_text())


def validate(doc, schema_name):
    jsonschema.validate(doc, load_schema(schema_name))


def stdout_json(stdout):
    lines = [l for l in stdout.strip().splitlines() if l]
    assert len(lines) == 1, f"expected a single JSON line, got {len(lines)}"
    return json.loads(lines[0])


# --------------------------------------------------------------------------
# shared datasets and runs (built once; the CLI must be fast enough for this)
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tetris_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tetris")
    code, stdout, _ = run_cli(["gen-tetris", "--row", "1x2pi", "--seed", 0,
                               "--out", out])
    assert code == 0
    return out, stdout_json(stdout)


@pytest.fixture(scope="module")
def ns_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("ns")
    code, stdout, _ = run_cli(["gen-ns", "--scenario", "open", "--n-traj", 2,
                               "--grid", 20, "--nodes", 32, "--steps", 6,
                               "--seed", 5, "--out", out])
    assert code == 0
    return out, stdout_json(stdout)


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory, ns_dir):
    ns_path, _ = ns_dir
    out = tmp_path_factory.mktemp("run")
    cfg = out / "model.json"
    cfg.write_text(json.dumps({"n_layers": 1, "hidden_scalar": 6, "hidden_rot": 3,
                               "n_base": 4, "cutoff": 10.0, "conv_kind": "se2-mlp"}))
    code, stdout, err = run_cli(["train", "--task", "ns", "--data", ns_path,
                                 "--model-config", cfg, "--epochs", 2,
                                 "--batch-size", 8, "--out", out])
    assert code == 0, err
    return out, stdout_json(stdout)


# --------------------------------------------------------------------------
# gen-tetris
# --------------------------------------------------------------------------

class TestGenTetris:
    def test_manifest_counts_and_schema(self, tetris_dir):
        out, report = tetris_dir
        assert report["samples"] == 7
        doc = data.load_manifest(out / "manifest.json")
        validate(doc, "manifest.schema.json")
        assert doc["counts"]["per_label"] == [1] * 7

    def test_test_row_is_700(self, tmp_path):
        code, stdout, _ = run_cli(["gen-tetris", "--row", "test", "--seed", 9,
                                   "--out", tmp_path / "t"])
        assert code == 0
        assert stdout_json(stdout)["samples"] == 700

    def test_rerun_is_byte_identical(self, tetris_dir, tmp_path):
        out, _ = tetris_dir
        code, _, _ = run_cli(["gen-tetris", "--row", "1x2pi", "--seed", 0,
                              "--out", tmp_path / "again"])
        assert code == 0
        first = (out / "tetris_1x2pi.json").read_bytes()
        again = (tmp_path / "again" / "tetris_1x2pi.json").read_bytes()
        assert first == again

    def test_bad_row_exits_2(self, tmp_path):
        code, _, err = run_cli(["gen-tetris", "--row", "3xpi", "--out", tmp_path])
        assert code == 2
        assert "invalid choice" in err

    def test_missing_out_exits_2(self):
        code, _, _ = run_cli(["gen-tetris", "--row", "test"])
        assert code == 2


# --------------------------------------------------------------------------
# gen-ns
# --------------------------------------------------------------------------

class TestGenNS:
    def test_manifest_schema_and_params(self, ns_dir):
        out, report = ns_dir
        assert report["trajectories"] == 2
        doc = data.load_manifest(out / "manifest.json")
        validate(doc, "manifest.schema.json")
        assert doc["params"]["force_mode"] == "varying"
        assert doc["params"]["grid"] == [20, 20]

    def test_fixed_force_recorded(self, tmp_path):
        code, _, _ = run_cli(["gen-ns", "--scenario", "open", "--n-traj", 1,
                              "--grid", 16, "--nodes", 16, "--steps", 4,
                              "--force", "fixed", "--seed", 1, "--out", tmp_path])
        assert code == 0
        doc = data.load_manifest(tmp_path / "manifest.json")
        assert doc["files"][0]["force"] == [0.0, 0.5]

    def test_rerun_checksums_identical(self, ns_dir, tmp_path):
        out, _ = ns_dir
        code, _, _ = run_cli(["gen-ns", "--scenario", "open", "--n-traj", 2,
                              "--grid", 20, "--nodes", 32, "--steps", 6,
                              "--seed", 5, "--out", tmp_path / "again"])
        assert code == 0
        a = data.load_manifest(out / "manifest.json")
        b = data.load_manifest(tmp_path / "again" / "manifest.json")
        assert [f["sha256"] for f in a["files"]] == [f["sha256"] for f in b["files"]]

    def test_too_few_steps_exits_2(self, tmp_path):
        code, _, err = run_cli(["gen-ns", "--scenario", "open", "--n-traj", 1,
                                "--grid", 16, "--nodes", 16, "--steps", 3,
                                "--out", tmp_path])
        assert code == 2
        assert "--steps" in err

    def test_solver_failure_exits_3_and_cleans_partials(self, tmp_path, monkeypatch):
        out = tmp_path / "ds"

        def boom(out_dir, **kwargs):
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            (Path(out_dir) / "traj_0000.se2ds").write_bytes(b"partial")
            raise sim.SolverFailure("pressure solve stalled")

        monkeypatch.setattr(data, "build_ns_dataset", boom)
        code, _, err = run_cli(["gen-ns", "--scenario", "open", "--n-traj", 1,
                                "--grid", 16, "--nodes", 16, "--steps", 4,
                                "--out", out])
        assert code == 3
        assert "pressure solve stalled" in err
        assert not list(out.glob("*"))


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

class TestTrain:
    def test_report_schema_and_artifacts(self, trained_run):
        out, report = trained_run
        validate(report, "train-report.schema.json")
        assert report["task"] == "ns"
        assert report["epochs"] == 2
        assert Path(report["checkpoint"]).exists()
        assert Path(report["metrics_csv"]).exists()
        assert (out / "figures" / "training_curves.png").exists()

    def test_flag_overrides_config_file(self, ns_dir, tmp_path):
        ns_path, _ = ns_dir
        tc = tmp_path / "train.json"
        tc.write_text(json.dumps({"epochs": 3, "batch_size": 8}))
        code, stdout, _ = run_cli(["train", "--task", "ns", "--data", ns_path,
                                   "--conv-kind", "se2-mlp", "--train-config", tc,
                                   "--epochs", 1, "--no-figures",
                                   "--out", tmp_path / "run"])
        assert code == 0
        report = stdout_json(stdout)
        assert report["epochs"] == 1
        assert "figures" not in report
        assert not (tmp_path / "run" / "figures").exists()

    def test_env_overrides_file_but_not_flag(self, ns_dir, tmp_path, monkeypatch):
        ns_path, _ = ns_dir
        tc = tmp_path / "train.json"
        tc.write_text(json.dumps({"epochs": 1, "batch_size": 8, "precision": 32}))
        args = ["train", "--task", "ns", "--data", ns_path, "--conv-kind", "se2-mlp",
                "--train-config", tc, "--no-figures"]
        code, stdout, _ = run_cli(args + ["--out", tmp_path / "a"],
                                  env={"SE2_PRECISION": "64"}, monkeypatch=monkeypatch)
        assert code == 0 and stdout_json(stdout)["precision"] == 64
        code, stdout, _ = run_cli(args + ["--out", tmp_path / "b", "--precision", "32"],
                                  env={"SE2_PRECISION": "64"}, monkeypatch=monkeypatch)
        assert code == 0 and stdout_json(stdout)["precision"] == 32

    def test_bad_env_precision_exits_2(self, ns_dir, tmp_path, monkeypatch):
        ns_path, _ = ns_dir
        code, _, err = run_cli(["train", "--task", "ns", "--data", ns_path,
                                "--conv-kind", "se2-mlp", "--epochs", 1,
                                "--no-figures", "--out", tmp_path / "run"],
                               env={"SE2_PRECISION": "48"}, monkeypatch=monkeypatch)
        assert code == 2
        assert "SE2_PRECISION" in err

    def test_unknown_config_key_exits_2(self, ns_dir, tmp_path):
        ns_path, _ = ns_dir
        tc = tmp_path / "train.json"
        tc.write_text(json.dumps({"epochs": 1, "learning_rate": 0.1}))
        code, _, err = run_cli(["train", "--task", "ns", "--data", ns_path,
                                "--train-config", tc, "--out", tmp_path / "run"])
        assert code == 2
        assert "learning_rate" in err

    def test_invalid_config_value_exits_2(self, ns_dir, tmp_path):
        ns_path, _ = ns_dir
        tc = tmp_path / "train.json"
        tc.write_text(json.dumps({"epochs": 0}))
        code, _, err = run_cli(["train", "--task", "ns", "--data", ns_path,
                                "--train-config", tc, "--out", tmp_path / "run"])
        assert code == 2
        assert "epochs" in err

    def test_tetris_inv_kind_reports_zero_rotation_ops(self, tetris_dir, tmp_path):
        tetris_path, _ = tetris_dir
        code, stdout, err = run_cli(["train", "--task", "tetris",
                                     "--data", tetris_path,
                                     "--conv-kind", "inv-mlp", "--epochs", 2,
                                     "--batch-size", 4, "--no-figures",
                                     "--out", tmp_path / "run"])
        assert code == 0, err
        report = stdout_json(stdout)
        validate(report, "train-report.schema.json")
        assert report["task"] == "tetris"
        assert report["rotation_ops"] == 0
        assert 0.0 <= report["test_accuracy"] <= 1.0

    def test_tetris_equivariant_kind_uses_rotations(self, tetris_dir, tmp_path):
        tetris_path, _ = tetris_dir
        code, stdout, _ = run_cli(["train", "--task", "tetris",
                                   "--data", tetris_path,
                                   "--conv-kind", "se2-mlp", "--epochs", 1,
                                   "--batch-size", 4, "--no-figures",
                                   "--out", tmp_path / "run"])
        assert code == 0
        assert stdout_json(stdout)["rotation_ops"] > 0

    def test_divergence_exits_4(self, ns_dir, tmp_path, monkeypatch):
        from se2gnn import train as train_mod

        ns_path, _ = ns_dir

        def explode(*args, **kwargs):
            raise train_mod.TrainingDiverged("non-finite loss at step 1")

        monkeypatch.setattr(train_mod, "train_surrogate", explode)
        monkeypatch.setattr(cli.train, "train_surrogate", explode, raising=False)
        code, _, err = run_cli(["train", "--task", "ns", "--data", ns_path,
                                "--conv-kind", "se2-mlp",
                                "--out", tmp_path / "run"])
        assert code == 4
        assert "non-finite" in err

    def test_ns_dataset_for_tetris_task_exits_5(self, ns_dir, tmp_path):
        ns_path, _ = ns_dir
        code, _, err = run_cli(["train", "--task", "tetris", "--data", ns_path,
                                "--out", tmp_path / "run"])
        assert code == 5
        assert "tetris" in err


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------

class TestEval:
    def test_report_schema_and_figures(self, trained_run, ns_dir, tmp_path):
        run_dir, train_report = trained_run
        ns_path, _ = ns_dir
        out = tmp_path / "ev"
        code, stdout, err = run_cli(["eval", "--checkpoint", train_report["checkpoint"],
                                     "--data", ns_path, "--rollout-horizon", 2,
                                     "--out", out])
        assert code == 0, err
        report = stdout_json(stdout)
        validate(report, "eval-report.schema.json")
        assert len(report["rollout_per_step"]) == 2
        assert report["rollout_mean"] == pytest.approx(
            float(np.mean(report["rollout_per_step"])))
        assert (out / "eval_report.json").exists()
        assert (out / "figures" / "rollout_error.png").exists()
        on_disk = json.loads((out / "eval_report.json").read_text())
        assert on_disk == report

    def test_horizon_beyond_data_exits_2(self, trained_run, ns_dir, tmp_path):
        _, train_report = trained_run
        ns_path, _ = ns_dir
        # 6 recorded steps leave at most 3 rollout targets
        code, _, err = run_cli(["eval", "--checkpoint", train_report["checkpoint"],
                                "--data", ns_path, "--rollout-horizon", 4])
        assert code == 2
        assert "rollout-horizon" in err

    def test_garbage_checkpoint_exits_5(self, ns_dir, tmp_path):
        ns_path, _ = ns_dir
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"NOTACKPT" + b"\x00" * 64)
        code, _, err = run_cli(["eval", "--checkpoint", bad, "--data", ns_path,
                                "--rollout-horizon", 1])
        assert code == 5
        assert "checkpoint" in err

    def test_classifier_checkpoint_exits_5(self, tetris_dir, ns_dir, tmp_path):
        tetris_path, _ = tetris_dir
        ns_path, _ = ns_dir
        code, stdout, _ = run_cli(["train", "--task", "tetris", "--data", tetris_path,
                                   "--conv-kind", "se2-mlp", "--epochs", 1,
                                   "--batch-size", 4, "--no-figures",
                                   "--out", tmp_path / "clf"])
        assert code == 0
        ckpt = stdout_json(stdout)["checkpoint"]
        code, _, err = run_cli(["eval", "--checkpoint", ckpt, "--data", ns_path,
                                "--rollout-horizon", 1])
        assert code == 5


# --------------------------------------------------------------------------
# equiv-check
# --------------------------------------------------------------------------

class TestEquivCheck:
    def test_random_se2_model_is_equivariant(self, tmp_path):
        code, stdout, err = run_cli(["equiv-check", "--random-model", "--trials", 5,
                                     "--graph-nodes", 24, "--precision", 64])
        assert code == 0, err
        report = stdout_json(stdout)
        validate(report, "equiv-report.schema.json")
        assert report["precision"] == 64
        assert report["max_error"] < 1e-10

    def test_random_invariant_model_is_not(self):
        code, stdout, _ = run_cli(["equiv-check", "--random-model",
                                   "--conv-kind", "inv-mlp", "--trials", 5,
                                   "--graph-nodes", 24, "--precision", 64])
        assert code == 0
        assert stdout_json(stdout)["mean_error"] > 1e-2

    def test_checkpoint_mode(self, trained_run):
        _, train_report = trained_run
        code, stdout, _ = run_cli(["equiv-check", "--checkpoint",
                                   train_report["checkpoint"], "--trials", 3,
                                   "--precision", 64])
        assert code == 0
        report = stdout_json(stdout)
        assert report["checkpoint"] == train_report["checkpoint"]
        assert report["max_error"] < 1e-10

    def test_compare_fourier_table(self, tmp_path):
        out = tmp_path / "eq"
        code, stdout, err = run_cli(["equiv-check", "--random-model", "--trials", 4,
                                     "--graph-nodes", 16, "--compare-fourier",
                                     "4,8,16", "--out", out])
        assert code == 0, err
        report = stdout_json(stdout)
        validate(report, "equiv-report.schema.json")
        assert [r["n_samples"] for r in report["fourier"]] == [4, 8, 16]
        assert all(r["mean_error"] >= 0 for r in report["fourier"])
        assert "activation_mean_error" in report
        assert (out / "equiv_report.json").exists()
        assert (out / "figures" / "fourier_trend.png").exists()

    def test_bad_fourier_list_exits_2(self):
        code, _, err = run_cli(["equiv-check", "--random-model",
                                "--compare-fourier", "4,eight"])
        assert code == 2

    def test_requires_model_source(self):
        code, _, _ = run_cli(["equiv-check", "--trials", 3])
        assert code == 2


# --------------------------------------------------------------------------
# module entry point
# --------------------------------------------------------------------------

def test_module_invocation():
    proc = subprocess.run([sys.executable, "-m", "se2gnn.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "gen-tetris" in proc.stdout
