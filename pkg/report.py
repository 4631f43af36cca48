"""Run artifacts: JSON manifests, plot-ready CSV files, 2-D feature projections and the
sqlite index of everything a run wrote."""
import csv
import json
import os
import sqlite3
import time
import zlib
from dataclasses import asdict, dataclass, field, is_dataclass
from datetime import datetime
from typing import Dict, List, Optional

import numpy as np
from sklearn.decomposition import PCA
from sklearn.metrics import silhouette_score

from console import debug_print

TOOL_VERSION = "1.0.0"
MANIFEST_FORMAT_VERSION = 1
INDEX_DB_NAME = "runs_index.db"
CRC32_CHUNK_SIZE = 1024 * 1024
TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S"

TRACE_COLUMNS = ["epoch", "train_accuracy", "train_loss", "mean_gfca", "nc1", "nc2", "nc3", "nc4"]
METRICS_COLUMNS = ["sample_id", "y", "y_hat", "correct", "gfca", "pfca", "entropy"]
STEP_COLUMNS = [
    "step", "segment", "n", "batch_accuracy", "pass_count", "mean_lambda",
    "mean_l_ent", "mean_l_nc", "mean_gfca", "mean_pfca", "loss", "skipped",
]
PROJECTION_COLUMNS = ["sample_id", "method", "x", "y", "label", "prediction"]


def _jsonable(value):
    if is_dataclass(value):
        return _jsonable(asdict(value))
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return str(value)
    return value


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: List[int]
    dataset: dict = field(default_factory=dict)
    artifacts: List[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    started: str = ""
    finished: Optional[str] = None
    wall_clock_seconds: Optional[float] = None
    interrupted: bool = False
    tool_version: str = TOOL_VERSION
    _clock: float = field(default=0.0, repr=False)

    @classmethod
    def start(cls, command, config, seeds):
        manifest = cls(command=command, config=_jsonable(config), seeds=[int(s) for s in seeds])
        manifest.started = datetime.now().strftime(TIMESTAMP_FORMAT)
        manifest._clock = time.monotonic()
        return manifest

    def add_artifact(self, path, kind):
        self.artifacts.append({"path": os.path.basename(path), "kind": kind})
        return path

    def finish(self, interrupted=False):
        self.finished = datetime.now().strftime(TIMESTAMP_FORMAT)
        self.wall_clock_seconds = round(time.monotonic() - self._clock, 3)
        self.interrupted = bool(interrupted)
        return self

    def to_dict(self):
        return {
            "format_version": MANIFEST_FORMAT_VERSION,
            "tool_version": self.tool_version,
            "command": self.command,
            "config": self.config,
            "seeds": self.seeds,
            "dataset": _jsonable(self.dataset),
            "artifacts": self.artifacts,
            "summary": _jsonable(self.summary),
            "started": self.started,
            "finished": self.finished,
            "wall_clock_seconds": self.wall_clock_seconds,
            "interrupted": self.interrupted,
        }

    def write(self, path):
        return write_json(self.to_dict(), path)


def write_json(data, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_jsonable(data), f, indent=2, sort_keys=True)
    return path


def load_manifest(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _cell(value):
    """CSV cell text; floats keep full precision, missing values are empty."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return value


def _write_rows(path, columns, rows):
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    return path


def write_trace_csv(trace, path):
    return _write_rows(path, TRACE_COLUMNS, ([getattr(r, c) for c in TRACE_COLUMNS] for r in trace.records))


def write_metrics_csv(stats, path):
    return _write_rows(path, METRICS_COLUMNS, ([getattr(s, c) for c in METRICS_COLUMNS] for s in stats.samples))


def write_steps_csv(steps, path):
    return _write_rows(path, STEP_COLUMNS, ([getattr(s, c) for c in STEP_COLUMNS] for s in steps))


def write_table_csv(rows, path):
    """Write a list of dicts with the keys of the first row as header."""
    if not rows:
        return _write_rows(path, [], [])
    columns = list(rows[0])
    return _write_rows(path, columns, ([row.get(c) for c in columns] for row in rows))


def read_csv_rows(path):
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def misalignment_summary(stats):
    def group(g):
        return {
            "count": g.count,
            "mean_gfca": g.mean_gfca,
            "mean_pfca": g.mean_pfca,
            "var_gfca": g.var_gfca,
            "var_pfca": g.var_pfca,
        }

    return {
        "correct": group(stats.correct),
        "wrong": group(stats.wrong),
        "wrong_defined": stats.wrong.defined,
        "low_confidence": stats.low_confidence,
        "wrong_margin": stats.wrong_margin,
        "skipped": stats.skipped,
    }


# --- projection ---

@dataclass
class ProjectionDump:
    rows: List[tuple]
    silhouettes: Dict[str, Optional[float]]
    explained_variance_ratio: List[float]


def project_features(runs, seed=0):
    """Project features of several methods onto one shared 2-D PCA basis.
    Args:
        runs: dict of method tag -> (features, sample ids, labels, predictions)
        seed: recorded with the PCA (the full SVD solver is deterministic)
    Returns: ProjectionDump with one row per (sample, method) and the silhouette score
    of each method's 2-D coordinates under the true labels
    """
    if not runs:
        raise ValueError("nothing to project")
    stacked = np.vstack([np.asarray(features, dtype=np.float64) for features, _, _, _ in runs.values()])
    pca = PCA(n_components=2, svd_solver="full", random_state=seed)
    pca.fit(stacked)
    rows, silhouettes = [], {}
    for method, (features, ids, labels, predictions) in runs.items():
        coords = pca.transform(np.asarray(features, dtype=np.float64))
        if not np.all(np.isfinite(coords)):
            raise FloatingPointError(f"projection of {method} features is not finite")
        labels = np.asarray(labels)
        for sample_id, (px, py), label, prediction in zip(ids, coords, labels, predictions):
            rows.append((int(sample_id), method, float(px), float(py), int(label), int(prediction)))
        if 2 <= len(np.unique(labels)) < len(labels):
            silhouettes[method] = float(silhouette_score(coords, labels))
        else:
            silhouettes[method] = None
            debug_print(f"DEBUG: silhouette undefined for {method} ({len(np.unique(labels))} labels)")
    return ProjectionDump(rows, silhouettes, [float(r) for r in pca.explained_variance_ratio_])


def write_projection_csv(dump, path):
    return _write_rows(path, PROJECTION_COLUMNS, dump.rows)


# --- run index ---

def file_crc32(path):
    """CRC32 of a file as 8 uppercase hex digits."""
    with open(path, "rb") as f:
        crc = 0
        while chunk := f.read(CRC32_CHUNK_SIZE):
            crc = zlib.crc32(chunk, crc)
    return f"{crc & 0xFFFFFFFF:08X}"


def init_index(out_dir):
    """Open (creating if needed) the artifact index of an output directory.
    Returns: Database connection object."""
    conn = sqlite3.connect(os.path.join(out_dir, INDEX_DB_NAME))
    c = conn.cursor()
    c.execute(
        """
        CREATE TABLE IF NOT EXISTS artifacts (
            path TEXT PRIMARY KEY,
            kind TEXT,
            crc32 TEXT,
            manifest TEXT,
            registered TEXT
        )
        """
    )
    c.execute(
        """
        CREATE TABLE IF NOT EXISTS metadata (
            key TEXT PRIMARY KEY,
            value TEXT
        )
        """
    )
    conn.commit()
    return conn


def register_artifact(conn, path, kind, manifest_path):
    crc = file_crc32(path)
    c = conn.cursor()
    c.execute(
        "INSERT OR REPLACE INTO artifacts (path, kind, crc32, manifest, registered) VALUES (?, ?, ?, ?, ?)",
        (os.path.basename(path), kind, crc, os.path.basename(manifest_path), datetime.now().strftime(TIMESTAMP_FORMAT)),
    )
    conn.commit()
    debug_print(f"DEBUG: registered {kind} {path} crc32={crc}")
    return crc


def list_artifacts(conn):
    c = conn.cursor()
    c.execute("SELECT path, kind, crc32, manifest FROM artifacts ORDER BY path")
    return c.fetchall()


def get_metadata(conn, key):
    """Get metadata value from the index.
    Returns: Metadata value or None if not found."""
    c = conn.cursor()
    c.execute("SELECT value FROM metadata WHERE key = ?", (key,))
    row = c.fetchone()
    return row[0] if row else None


def set_metadata(conn, key, value):
    c = conn.cursor()
    c.execute("INSERT OR REPLACE INTO metadata (key, value) VALUES (?, ?)", (key, value))
    conn.commit()


def publish(out_dir, manifest, manifest_name, interrupted=False):
    """Finish and write a manifest, then index it and every artifact it lists.
    Returns: manifest path"""
    manifest.finish(interrupted=interrupted)
    manifest_path = manifest.write(os.path.join(out_dir, manifest_name))
    conn = init_index(out_dir)
    try:
        for artifact in manifest.artifacts:
            register_artifact(conn, os.path.join(out_dir, artifact["path"]), artifact["kind"], manifest_path)
        register_artifact(conn, manifest_path, "manifest", manifest_path)
        set_metadata(conn, "last_command", manifest.command)
        set_metadata(conn, "last_run", manifest.finished)
    finally:
        conn.close()
    return manifest_path
