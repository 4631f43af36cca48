"""Seeded synthetic classification data and severity-graded distribution shifts.

Severity schedules (entry s-1 is the magnitude at severity s):

    gaussian_noise   additive N(0, (m*spread)^2) noise           m = 0.25 0.5 1.0 1.5 2.0
    mean_shift       x + m*spread*u, u a seeded unit vector       m = 0.5  1.0 1.5 2.0 3.0
    rotation         rotate one seeded 2-D plane by m degrees     m = 10   20  35  50  70
    feature_scale    x_d * exp(m*u_d), u_d ~ U(-1, 1) seeded      m = 0.1  0.2 0.35 0.5 0.7
    feature_dropout  zero each feature with probability m         m = 0.05 0.1 0.2 0.3 0.45
"""
import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional

import numpy as np

from console import debug_print
from tensorcore import make_rng

GENERATOR_NAME = "gaussian_clusters"
# Class means lie on a sphere of radius RADIUS_FACTOR * spread unless given explicitly
RADIUS_FACTOR = 4.0
# Centers are redrawn until every pair is at least this many radii apart
MIN_SEPARATION_FACTOR = 1.2
MAX_CENTER_DRAWS = 1000
MAX_SEVERITY = 5

# Substreams of one seed
CENTER_STREAM = 0
SAMPLE_STREAM = 1
SHIFT_STREAM = 3

SHIFT_KINDS = ("gaussian_noise", "mean_shift", "rotation", "feature_scale", "feature_dropout")
SEVERITY_SCHEDULES = {
    "gaussian_noise": (0.25, 0.5, 1.0, 1.5, 2.0),
    "mean_shift": (0.5, 1.0, 1.5, 2.0, 3.0),
    "rotation": (10.0, 20.0, 35.0, 50.0, 70.0),
    "feature_scale": (0.1, 0.2, 0.35, 0.5, 0.7),
    "feature_dropout": (0.05, 0.1, 0.2, 0.3, 0.45),
}

DATASET_MAGIC = b"NCDS"
DATASET_FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHIII")
_CRC = struct.Struct("<I")


class ShiftError(ValueError):
    """Invalid shift specification or shift applied to an already-shifted dataset."""


class DatasetFormatError(ValueError):
    """Dataset file is truncated, corrupted or from another format version."""


@dataclass
class DatasetMeta:
    seed: int
    classes: int
    dim: int
    spread: float
    radius: float
    sample_seed: int
    generator: str = GENERATOR_NAME
    shift_kind: Optional[str] = None
    severity: int = 0
    shift_seed: Optional[int] = None
    imbalance: float = 1.0
    class_counts: List[int] = field(default_factory=list)


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    meta: DatasetMeta

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.x.shape[1] != self.meta.dim:
            raise ValueError(f"features must be n x {self.meta.dim}, got {self.x.shape}")
        if self.y.shape != (self.x.shape[0],):
            raise ValueError(f"expected {self.x.shape[0]} labels, got {self.y.shape}")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.meta.classes):
            raise ValueError(f"labels must lie in [0, {self.meta.classes})")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("features must be finite")
        if self.meta.severity == 0 and self.meta.shift_kind is not None:
            raise ValueError("severity 0 is reserved for the unshifted source distribution")

    def __len__(self):
        return int(self.y.shape[0])

    @property
    def num_classes(self):
        return self.meta.classes

    @property
    def is_shifted(self):
        return self.meta.severity != 0


@dataclass(frozen=True)
class ShiftSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ShiftError(f"unknown shift kind {self.kind!r}; expected one of {', '.join(SHIFT_KINDS)}")
        if isinstance(self.severity, bool) or int(self.severity) != self.severity:
            raise ShiftError(f"severity must be an integer, got {self.severity!r}")
        if not 1 <= self.severity <= MAX_SEVERITY:
            raise ShiftError(f"severity must be in 1..{MAX_SEVERITY}, got {self.severity}")

    @property
    def magnitude(self):
        """Scalar strength of the shift; strictly increasing in severity for every kind."""
        return SEVERITY_SCHEDULES[self.kind][self.severity - 1]


def _pairwise_min_distance(points):
    diffs = points[:, None, :] - points[None, :, :]
    dists = np.linalg.norm(diffs, axis=-1)
    dists[np.diag_indices(len(points))] = np.inf
    return float(dists.min())


def draw_centers(classes, dim, radius, seed):
    """Class means drawn uniformly on the radius-`radius` sphere, redrawn until
    well separated (best draw kept if MAX_CENTER_DRAWS is exhausted)."""
    rng = make_rng(seed, CENTER_STREAM)
    best, best_sep = None, -1.0
    for _ in range(MAX_CENTER_DRAWS):
        centers = rng.standard_normal((classes, dim))
        centers *= radius / np.linalg.norm(centers, axis=1, keepdims=True)
        sep = _pairwise_min_distance(centers)
        if sep > best_sep:
            best, best_sep = centers, sep
        if sep >= MIN_SEPARATION_FACTOR * radius:
            return centers
    debug_print(
        f"DEBUG: center separation {best_sep:.3f} below {MIN_SEPARATION_FACTOR} x radius "
        f"after {MAX_CENTER_DRAWS} draws (K={classes}, D={dim}); keeping best draw"
    )
    return best


def _class_counts(classes, n_per_class, imbalance):
    if imbalance == 1.0:
        return [n_per_class] * classes
    return [
        max(1, int(round(n_per_class * imbalance ** (-j / (classes - 1)))))
        for j in range(classes)
    ]


def make_clusters(classes, dim, n_per_class, spread, seed, sample_seed=None, radius=None, imbalance=1.0):
    """K isotropic Gaussian clusters, spread^2 * I covariance, means on a sphere.
    Args:
        classes: K >= 2
        dim: D >= 2
        n_per_class: samples per class (largest class when imbalanced)
        spread: cluster standard deviation, > 0
        seed: determines the class means
        sample_seed: determines the samples (defaults to seed); a held-out split uses
            the same seed with another sample_seed
        radius: sphere radius, default RADIUS_FACTOR * spread
        imbalance: >= 1; class j gets n_per_class * imbalance^(-j/(K-1)) samples
    Returns: severity-0 Dataset
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if dim < 2:
        raise ValueError(f"need dimension >= 2, got {dim}")
    if n_per_class < 1:
        raise ValueError(f"need at least 1 sample per class, got {n_per_class}")
    if not spread > 0:
        raise ValueError(f"spread must be positive, got {spread}")
    if imbalance < 1.0:
        raise ValueError(f"imbalance must be >= 1, got {imbalance}")
    if sample_seed is None:
        sample_seed = seed
    if radius is None:
        radius = RADIUS_FACTOR * spread

    centers = draw_centers(classes, dim, radius, seed)
    counts = _class_counts(classes, n_per_class, imbalance)
    rng = make_rng(sample_seed, SAMPLE_STREAM)
    xs, ys = [], []
    for label, count in enumerate(counts):
        xs.append(centers[label] + spread * rng.standard_normal((count, dim)))
        ys.append(np.full(count, label, dtype=np.int64))
    meta = DatasetMeta(
        seed=int(seed),
        classes=int(classes),
        dim=int(dim),
        spread=float(spread),
        radius=float(radius),
        sample_seed=int(sample_seed),
        imbalance=float(imbalance),
        class_counts=[int(c) for c in counts],
    )
    return Dataset(np.concatenate(xs), np.concatenate(ys), meta)


def class_centers(meta):
    """The generator's sampled class means for a dataset's meta."""
    return draw_centers(meta.classes, meta.dim, meta.radius, meta.seed)


def shift_vector(spec, dim, spread):
    """The displacement added by a mean_shift spec."""
    rng = make_rng(spec.seed, SHIFT_STREAM)
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    return direction * (spec.magnitude * spread)


def _rotation_plane(rng, dim):
    q, _ = np.linalg.qr(rng.standard_normal((dim, 2)))
    return q[:, 0], q[:, 1]


def _shifted_features(x, spec, spread):
    rng = make_rng(spec.seed, SHIFT_STREAM)
    m = spec.magnitude
    if spec.kind == "gaussian_noise":
        return x + (m * spread) * rng.standard_normal(x.shape)
    if spec.kind == "mean_shift":
        return x + shift_vector(spec, x.shape[1], spread)
    if spec.kind == "rotation":
        u, v = _rotation_plane(rng, x.shape[1])
        theta = np.deg2rad(m)
        a, b = x @ u, x @ v
        rotated_a = np.cos(theta) * a - np.sin(theta) * b
        rotated_b = np.sin(theta) * a + np.cos(theta) * b
        return x + np.outer(rotated_a - a, u) + np.outer(rotated_b - b, v)
    if spec.kind == "feature_scale":
        return x * np.exp(m * rng.uniform(-1.0, 1.0, size=x.shape[1]))
    # feature_dropout
    keep = rng.random(x.shape) >= m
    return x * keep


def apply_shift(d, spec):
    """Shift a severity-0 dataset. Labels are never touched.
    Shifts do not compose: the continual scenario re-shifts the source per segment."""
    if d.is_shifted:
        raise ShiftError(
            f"dataset is already shifted ({d.meta.shift_kind} severity {d.meta.severity}); "
            "apply shifts to the source dataset"
        )
    x = _shifted_features(d.x, spec, d.meta.spread)
    meta = replace(
        d.meta,
        shift_kind=spec.kind,
        severity=int(spec.severity),
        shift_seed=int(spec.seed),
        class_counts=list(d.meta.class_counts),
    )
    return Dataset(x, d.y.copy(), meta)


def meta_to_dict(meta):
    return asdict(meta)


def meta_from_dict(data):
    return DatasetMeta(**data)


def save_dataset(d, path):
    """Write the binary dataset file plus its JSON sidecar (<path>.json).
    Returns: (dataset path, sidecar path)"""
    meta_bytes = json.dumps(meta_to_dict(d.meta), sort_keys=True).encode("utf-8")
    n, dim = d.x.shape
    body = b"".join([
        _HEADER.pack(DATASET_MAGIC, DATASET_FORMAT_VERSION, d.meta.classes, dim, n, len(meta_bytes)),
        meta_bytes,
        d.x.astype("<f8").tobytes(order="C"),
        d.y.astype("<u2").tobytes(),
    ])
    with open(path, "wb") as f:
        f.write(body)
        f.write(_CRC.pack(zlib.crc32(body) & 0xFFFFFFFF))
    sidecar = path + ".json"
    with open(sidecar, "w", encoding="utf-8") as f:
        json.dump({"format_version": DATASET_FORMAT_VERSION, **meta_to_dict(d.meta)}, f, indent=2, sort_keys=True)
    return path, sidecar


def load_dataset(path):
    """Read a dataset file written by save_dataset; bit-exact round trip."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size + _CRC.size:
        raise DatasetFormatError(f"{path}: file truncated ({len(raw)} bytes)")
    magic, version, classes, dim, n, meta_len = _HEADER.unpack_from(raw, 0)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}, expected {DATASET_MAGIC!r}")
    if version != DATASET_FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: format version {version}, expected {DATASET_FORMAT_VERSION}")
    expected = _HEADER.size + meta_len + 8 * n * dim + 2 * n + _CRC.size
    if len(raw) != expected:
        raise DatasetFormatError(f"{path}: expected {expected} bytes, found {len(raw)} (truncated or padded)")
    body, (crc,) = raw[:-_CRC.size], _CRC.unpack_from(raw, len(raw) - _CRC.size)
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise DatasetFormatError(f"{path}: checksum mismatch")
    offset = _HEADER.size
    try:
        meta = meta_from_dict(json.loads(body[offset:offset + meta_len].decode("utf-8")))
    except (ValueError, TypeError) as e:
        raise DatasetFormatError(f"{path}: unreadable metadata: {e}") from e
    offset += meta_len
    x = np.frombuffer(body, dtype="<f8", count=n * dim, offset=offset).reshape(n, dim).astype(np.float64)
    offset += 8 * n * dim
    y = np.frombuffer(body, dtype="<u2", count=n, offset=offset).astype(np.int64)
    if meta.classes != classes or meta.dim != dim:
        raise DatasetFormatError(f"{path}: header/meta disagree on K or D")
    return Dataset(x, y, meta)


def dataset_exists(path):
    return os.path.exists(path) and os.path.exists(path + ".json")
