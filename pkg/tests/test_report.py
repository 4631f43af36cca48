"""Unit tests for manifests, CSV exports, projections and the run index."""
import os
import sys
import zlib

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import model
import ncmetrics
import report
import ttaengine
from ttaengine import AdaptConfig, Scenario


@pytest.mark.unit
class TestManifest:
    """Tests for RunManifest."""

    def test_round_trip(self, temp_dir):
        """A written manifest carries config, seeds, artifacts and timing."""
        manifest = report.RunManifest.start("adapt", {"adapt": {"alpha": 0.5, "k": np.int64(2)}}, [0, 1])
        manifest.add_artifact(os.path.join(temp_dir, "steps.csv"), "steps")
        manifest.summary["accuracy"] = np.float64(0.75)
        manifest.finish()
        loaded = report.load_manifest(manifest.write(os.path.join(temp_dir, "m.json")))
        assert loaded["format_version"] == report.MANIFEST_FORMAT_VERSION
        assert loaded["config"]["adapt"]["k"] == 2
        assert loaded["seeds"] == [0, 1]
        assert loaded["artifacts"] == [{"path": "steps.csv", "kind": "steps"}]
        assert loaded["summary"]["accuracy"] == 0.75
        assert loaded["wall_clock_seconds"] >= 0.0
        assert loaded["interrupted"] is False

    def test_non_finite_values_are_strings(self, temp_dir):
        path = report.write_json({"gamma": float("inf")}, os.path.join(temp_dir, "x.json"))
        assert report.load_manifest(path) == {"gamma": "inf"}


@pytest.mark.unit
class TestCsvExports:
    """Tests for the CSV writers."""

    def test_cells(self):
        assert report._cell(None) == ""
        assert report._cell(True) == 1
        assert report._cell(np.float64(0.1)) == "0.1"
        assert report._cell(np.int32(4)) == 4

    def test_trace_columns(self, temp_dir, trained):
        _, _, _, _, trace = trained
        path = report.write_trace_csv(trace, os.path.join(temp_dir, "trace.csv"))
        rows = report.read_csv_rows(path)
        assert list(rows[0]) == report.TRACE_COLUMNS
        assert len(rows) == len(trace.records)
        assert float(rows[-1]["mean_gfca"]) == trace.records[-1].mean_gfca

    def test_metrics_rows_reproduce_group_means(self, temp_dir, trained):
        """Recomputing group means from the per-sample CSV gives the stored statistics."""
        params, norm, _, test_set, _ = trained
        out = model.predict(params, norm, test_set.x)
        stats = ncmetrics.misalignment_stats(out.H, params.classifier, test_set.y, out.P, skip_degenerate=True)
        rows = report.read_csv_rows(report.write_metrics_csv(stats, os.path.join(temp_dir, "metrics.csv")))
        assert list(rows[0]) == report.METRICS_COLUMNS
        correct = [float(r["gfca"]) for r in rows if r["correct"] == "1"]
        assert np.mean(correct) == pytest.approx(stats.correct.mean_gfca, abs=1e-12)
        summary = report.misalignment_summary(stats)
        assert summary["correct"]["count"] == len(correct)

    def test_steps_rows(self, temp_dir, trained):
        """One row per step; baselines leave the objective columns empty."""
        params, norm, _, test_set, _ = trained
        log = ttaengine.run_scenario(params, norm, test_set, Scenario("mild"), AdaptConfig(method="no_adapt"), verbose=False)
        rows = report.read_csv_rows(report.write_steps_csv(log.steps, os.path.join(temp_dir, "steps.csv")))
        assert list(rows[0]) == report.STEP_COLUMNS
        assert len(rows) == len(log.steps)
        assert rows[0]["mean_lambda"] == "" and rows[0]["loss"] == ""
        assert float(rows[0]["batch_accuracy"]) == log.steps[0].batch_accuracy

    def test_table_from_dicts(self, temp_dir):
        path = report.write_table_csv([{"a": 1, "b": None}, {"a": 2, "b": 0.5}], os.path.join(temp_dir, "t.csv"))
        assert report.read_csv_rows(path) == [{"a": "1", "b": ""}, {"a": "2", "b": "0.5"}]


@pytest.mark.unit
class TestProjection:
    """Tests for project_features."""

    def _runs(self):
        rng = np.random.default_rng(0)
        labels = np.repeat([0, 1, 2], 10)
        centers = np.eye(3, 6) * 5.0
        tight = centers[labels] + 0.1 * rng.standard_normal((30, 6))
        loose = centers[labels] + 3.0 * rng.standard_normal((30, 6))
        ids = np.arange(30)
        return {"nctta": (tight, ids, labels, labels), "tent": (loose, ids, labels, labels)}

    def test_rows_and_silhouettes(self):
        """Tighter clusters get the higher silhouette score."""
        dump = report.project_features(self._runs())
        assert len(dump.rows) == 60
        assert {row[1] for row in dump.rows} == {"nctta", "tent"}
        assert dump.silhouettes["nctta"] > dump.silhouettes["tent"]
        assert len(dump.explained_variance_ratio) == 2

    def test_deterministic(self):
        assert report.project_features(self._runs()).rows == report.project_features(self._runs()).rows

    def test_empty(self):
        with pytest.raises(ValueError):
            report.project_features({})


@pytest.mark.unit
class TestRunIndex:
    """Tests for the sqlite artifact index."""

    def test_crc32_format(self, temp_dir):
        path = os.path.join(temp_dir, "blob.bin")
        data = b"neural collapse" * 1000
        with open(path, "wb") as f:
            f.write(data)
        assert report.file_crc32(path) == f"{zlib.crc32(data) & 0xFFFFFFFF:08X}"

    def test_metadata(self, temp_dir):
        conn = report.init_index(temp_dir)
        try:
            assert report.get_metadata(conn, "last_command") is None
            report.set_metadata(conn, "last_command", "train")
            report.set_metadata(conn, "last_command", "adapt")
            assert report.get_metadata(conn, "last_command") == "adapt"
        finally:
            conn.close()

    def test_publish_registers_everything(self, temp_dir):
        artifact = os.path.join(temp_dir, "steps.csv")
        with open(artifact, "w", encoding="utf-8") as f:
            f.write("step\n0\n")
        manifest = report.RunManifest.start("adapt", {}, [0])
        manifest.add_artifact(artifact, "steps")
        path = report.publish(temp_dir, manifest, "adapt_manifest.json")
        conn = report.init_index(temp_dir)
        try:
            entries = report.list_artifacts(conn)
            assert [(p, k) for p, k, _, _ in entries] == [("adapt_manifest.json", "manifest"), ("steps.csv", "steps")]
            assert entries[1][2] == report.file_crc32(artifact)
            assert report.get_metadata(conn, "last_command") == "adapt"
        finally:
            conn.close()
        assert os.path.basename(path) == "adapt_manifest.json"
