"""Tests for main command execution, from help text to full runs on a tiny config."""
import os
import sys
from unittest.mock import patch

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import nctta
import report


@pytest.fixture(autouse=True)
def no_signal_handlers():
    """Keep pytest's own Ctrl-C handling while main() runs."""
    with patch('nctta.install_signal_handlers'):
        yield


def _run(*argv):
    """Run main() with the given arguments and return its exit code."""
    with patch.object(sys, 'argv', ['nctta.py', *argv]):
        with pytest.raises(SystemExit) as exc_info:
            nctta.main()
    return exc_info.value.code


@pytest.fixture
def trained_dir(temp_dir, small_config_path):
    """An output directory holding a trained checkpoint and its datasets."""
    out = os.path.join(temp_dir, "runs")
    assert _run("train", "--config", small_config_path, "--out", out) == 0
    return out


@pytest.mark.unit
class TestMainExitCodes:
    """Tests for exit codes and top-level error handling."""

    def test_help_exits_zero(self, capsys):
        assert _run("--help") == 0
        assert "AVAILABLE COMMANDS" in capsys.readouterr().out

    def test_no_command_prints_help(self, capsys):
        assert _run() == 0
        assert "EXAMPLES" in capsys.readouterr().out

    def test_missing_config_exits_one(self, temp_dir, capsys):
        code = _run("train", "--config", os.path.join(temp_dir, "missing.ini"), "--out", temp_dir)
        assert code == 1
        assert "Error: config file not found" in capsys.readouterr().out

    def test_train_without_config(self, temp_dir, capsys):
        assert _run("train", "--out", temp_dir) == 1
        assert "train needs --config" in capsys.readouterr().out

    def test_missing_checkpoint(self, temp_dir, capsys):
        assert _run("eval", "--out", temp_dir) == 1
        assert "Error:" in capsys.readouterr().out

    def test_keyboard_interrupt_exits_130(self, small_config_path, capsys):
        with patch('nctta.load_config', side_effect=KeyboardInterrupt):
            assert _run("train", "--config", small_config_path) == 130
        assert "Interrupted by user" in capsys.readouterr().out

    def test_unknown_method(self, trained_dir, capsys):
        assert _run("adapt", "--out", trained_dir, "--method", "sar") == 1
        assert "Unknown method: sar" in capsys.readouterr().out


@pytest.mark.integration
class TestCommands:
    """End-to-end runs of every command on the tiny config."""

    def test_train_writes_artifacts(self, trained_dir):
        for name in ("train.ncds", "train.ncds.json", "test.ncds", "test.ncds.json", "model.ckpt",
                     "train_trace.csv", "train_manifest.json", report.INDEX_DB_NAME):
            assert os.path.exists(os.path.join(trained_dir, name)), name
        manifest = report.load_manifest(os.path.join(trained_dir, "train_manifest.json"))
        assert manifest["command"] == "train"
        assert manifest["config"]["data"]["classes"] == 3
        assert {a["kind"] for a in manifest["artifacts"]} >= {"checkpoint", "train_trace", "dataset"}
        assert manifest["summary"]["epochs_run"] >= 5

    def test_training_is_reproducible(self, temp_dir, small_config_path):
        """Two trainings with the same config produce bit-identical checkpoints."""
        blobs = []
        for name in ("a", "b"):
            out = os.path.join(temp_dir, name)
            assert _run("train", "--config", small_config_path, "--out", out) == 0
            with open(os.path.join(out, "model.ckpt"), "rb") as f:
                blobs.append(f.read())
        assert blobs[0] == blobs[1]

    def test_eval_shifted(self, trained_dir, small_config_path, capsys):
        code = _run("eval", "--config", small_config_path, "--out", trained_dir, "--shift", "gaussian_noise")
        assert code == 0
        assert "(gaussian_noise_2)" in capsys.readouterr().out
        manifest = report.load_manifest(os.path.join(trained_dir, "eval_gaussian_noise_2_manifest.json"))
        assert 0.0 <= manifest["summary"]["accuracy"] <= 1.0
        assert manifest["dataset"]["severity"] == 2

    def test_metrics(self, trained_dir, small_config_path):
        assert _run("metrics", "--config", small_config_path, "--out", trained_dir) == 0
        rows = report.read_csv_rows(os.path.join(trained_dir, "metrics_source.csv"))
        nc = report.load_manifest(os.path.join(trained_dir, "nc_report_source.json"))
        assert len(rows) + len(nc["misalignment"]["skipped"]) == 60
        assert set(nc["nc"]) >= {"nc1", "nc2", "nc3", "nc4", "nc3plus"}

    def test_adapt_methods(self, trained_dir, small_config_path):
        """One steps file per method; the manifest records mean accuracies."""
        code = _run("adapt", "--config", small_config_path, "--out", trained_dir, "--method", "no_adapt,tent,nctta")
        assert code == 0
        for method in ("no_adapt", "tent", "nctta"):
            rows = report.read_csv_rows(os.path.join(trained_dir, f"steps_{method}_mild_gaussian_noise_2_s0.csv"))
            assert len(rows) == 4
            assert list(rows[0]) == report.STEP_COLUMNS
        manifest = report.load_manifest(
            os.path.join(trained_dir, "adapt_no_adapt-tent-nctta_mild_gaussian_noise_2_manifest.json")
        )
        assert set(manifest["summary"]["mean_accuracy"]) == {"no_adapt", "tent", "nctta"}

    def test_adapt_ctta(self, trained_dir, small_config_path):
        code = _run("adapt", "--config", small_config_path, "--out", trained_dir,
                    "--scenario", "ctta", "--severities", "1,2,3")
        assert code == 0
        rows = report.read_csv_rows(os.path.join(trained_dir, "steps_nctta_ctta_gaussian_noise_1-2-3_s0.csv"))
        assert sorted({r["segment"] for r in rows}) == ["0", "1", "2"]

    def test_adapt_over_shift_kinds(self, trained_dir, small_config_path):
        code = _run("adapt", "--config", small_config_path, "--out", trained_dir,
                    "--shift", "gaussian_noise,rotation", "--method", "no_adapt")
        assert code == 0
        rows = report.read_csv_rows(os.path.join(trained_dir, "shift_summary_no_adapt_multishift.csv"))
        assert [r["shift"] for r in rows] == ["gaussian_noise", "rotation", "average"]

    def test_sweep(self, trained_dir, small_config_path):
        code = _run("sweep", "--config", small_config_path, "--out", trained_dir, "--sweep", "alpha=0:1:0.5,k=1:2")
        assert code == 0
        rows = report.read_csv_rows(os.path.join(trained_dir, "sweep_cells.csv"))
        assert len(rows) == 6
        assert [r["k"] for r in rows[:2]] == ["1", "2"]

    def test_project(self, trained_dir, small_config_path):
        assert _run("project", "--config", small_config_path, "--out", trained_dir) == 0
        rows = report.read_csv_rows(os.path.join(trained_dir, "projection_mild_gaussian_noise_2.csv"))
        assert len(rows) == 3 * 60
        assert {r["method"] for r in rows} == {"no_adapt", "tent", "nctta"}

    def test_project_extra_checkpoint(self, trained_dir, small_config_path):
        ckpt = os.path.join(trained_dir, "model.ckpt")
        code = _run("project", "--config", small_config_path, "--out", trained_dir,
                    "--method", "no_adapt", "--checkpoint", ckpt, "--checkpoint", ckpt)
        assert code == 0
        rows = report.read_csv_rows(os.path.join(trained_dir, "projection_mild_gaussian_noise_2.csv"))
        assert {r["method"] for r in rows} == {"no_adapt", "checkpoint:model"}

    def test_runs_are_indexed(self, trained_dir, small_config_path):
        _run("metrics", "--config", small_config_path, "--out", trained_dir)
        conn = report.init_index(trained_dir)
        try:
            paths = {p for p, _, _, _ in report.list_artifacts(conn)}
            assert report.get_metadata(conn, "last_command") == "metrics"
        finally:
            conn.close()
        assert {"model.ckpt", "metrics_source.csv", "metrics_source_manifest.json"} <= paths


@pytest.mark.slow
@pytest.mark.integration
class TestReferenceCommands:
    """Command-line runs on the reference checkpoint."""

    def test_project_separates_nctta_features_best(self, reference_dir):
        """On the shared PCA plane nctta's streamed features cluster by label better than tent's."""
        cfg, out = reference_dir
        assert _run("project", "--config", cfg.source, "--out", out) == 0
        manifest = report.load_manifest(os.path.join(out, "projection_mild_gaussian_noise_3_manifest.json"))
        silhouette = manifest["summary"]["silhouette"]
        assert silhouette["nctta"] > silhouette["tent"], silhouette
