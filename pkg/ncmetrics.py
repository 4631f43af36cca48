"""Neural-collapse and feature/classifier alignment measurements.

FCA distance: d_j = || h/||h|| - w_j/||w_j|| ||, the distance between the unit feature and
the unit classifier row of class j, always in [0, 2].
G-FCA reads it at the true label, P-FCA at the predicted one.

NC1-NC4 follow the usual formulations from the collapse literature:
    nc1  trace(Sw Sb^+) / K                      within- vs between-class covariance
    nc2  std(cos) + mean|cos + 1/(K-1)|          pairwise cosines of centered class means
    nc3  || M/||M||_F - W/||W||_F ||_F            centered means vs classifier rows
    nc4  agreement of nearest-class-mean and classifier argmax
"""
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from console import debug_print
from tensorcore import DEGENERATE_NORM, DegenerateVectorError, ShapeError

LOW_CONFIDENCE_COUNT = 5


class MissingClassError(ValueError):
    """Some classes have no samples in the batch."""

    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = [int(c) for c in missing]


@dataclass
class GroupStats:
    count: int
    mean_gfca: Optional[float] = None
    mean_pfca: Optional[float] = None
    var_gfca: Optional[float] = None
    var_pfca: Optional[float] = None

    @property
    def defined(self):
        return self.count > 0


@dataclass
class SampleMetrics:
    sample_id: int
    y: int
    y_hat: int
    correct: bool
    gfca: float
    pfca: float
    entropy: float


@dataclass
class MisalignmentStats:
    correct: GroupStats
    wrong: GroupStats
    samples: List[SampleMetrics]
    skipped: List[int]

    @property
    def low_confidence(self):
        """Wrong group too small to trust (but not empty)."""
        return 0 < self.wrong.count < LOW_CONFIDENCE_COUNT

    @property
    def wrong_margin(self):
        """mu_wrong - mu_hat_wrong; None when nothing was misclassified."""
        if not self.wrong.defined:
            return None
        return self.wrong.mean_gfca - self.wrong.mean_pfca


@dataclass
class NcReport:
    nc1: float
    nc2: float
    nc3: float
    nc4: float
    nc3plus: float
    nc2_equiangularity: float
    nc2_etf_deviation: float


def _unit_rows(m, what):
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    bad = np.flatnonzero(norms[..., 0] < DEGENERATE_NORM)
    if bad.size:
        raise DegenerateVectorError(f"{what} has norm below {DEGENERATE_NORM} at rows {bad.tolist()}", bad)
    return m / norms


def valid_rows(H):
    """Mask of feature rows whose norm is usable for FCA distances."""
    return np.linalg.norm(np.atleast_2d(H), axis=1) >= DEGENERATE_NORM


def fca_distances(h, omega):
    """FCA distances of one feature vector (K,) or of a batch (B, K).
    Raises DegenerateVectorError naming the offending sample rows (or classifier rows)."""
    h = np.asarray(h, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    single = h.ndim == 1
    H = np.atleast_2d(h)
    if H.shape[1] != omega.shape[1]:
        raise ShapeError(f"feature width {H.shape[1]} does not match classifier {omega.shape}", (H.shape, omega.shape))
    W = _unit_rows(omega, "classifier row")
    U = _unit_rows(H, "feature")
    d = np.linalg.norm(U[:, None, :] - W[None, :, :], axis=-1)
    d = np.clip(d, 0.0, 2.0)
    return d[0] if single else d


def cosines(h, omega):
    """Cosine similarity between features and every classifier row."""
    H = _unit_rows(np.atleast_2d(np.asarray(h, dtype=np.float64)), "feature")
    W = _unit_rows(np.asarray(omega, dtype=np.float64), "classifier row")
    c = np.clip(H @ W.T, -1.0, 1.0)
    return c[0] if np.ndim(h) == 1 else c


def fca_from_cosine(cos):
    return np.sqrt(np.clip(2.0 - 2.0 * np.asarray(cos), 0.0, 4.0))


def _check_index(index, size, what):
    if not 0 <= int(index) < size:
        raise IndexError(f"{what} {index} out of range for {size} classes")


def gfca(d, y):
    d = np.asarray(d)
    _check_index(y, d.shape[-1], "label")
    return float(d[int(y)])


def pfca(d, p):
    """FCA distance at argmax p (lowest index on ties)."""
    d = np.asarray(d)
    p = np.asarray(p)
    if p.shape != d.shape:
        raise ShapeError(f"probabilities {p.shape} do not match distances {d.shape}", (p.shape, d.shape))
    return float(d[int(np.argmax(p))])


def entropies(P):
    P = np.asarray(P, dtype=np.float64)
    safe = np.where(P > 0.0, P, 1.0)
    return -np.sum(np.where(P > 0.0, P * np.log(safe), 0.0), axis=-1)


def _group(gfcas, pfcas):
    if gfcas.size == 0:
        return GroupStats(count=0)
    return GroupStats(
        count=int(gfcas.size),
        mean_gfca=float(gfcas.mean()),
        mean_pfca=float(pfcas.mean()),
        var_gfca=float(gfcas.var()),
        var_pfca=float(pfcas.var()),
    )


def misalignment_stats(H, omega, y, P, skip_degenerate=False, sample_ids=None):
    """Split samples into correctly and wrongly classified groups and summarize the FCA
    distance at the true label and at the predicted label.
    Args:
        H: (B, L) features
        omega: (K, L) classifier
        y: (B,) labels
        P: (B, K) probabilities
        skip_degenerate: drop zero-norm feature rows (listed in .skipped) instead of raising
        sample_ids: ids for the per-sample rows (default 0..B-1)
    Returns: MisalignmentStats; the wrong group has count 0 and None stats when nothing
    was misclassified
    """
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if not H.shape[0] == P.shape[0] == y.shape[0]:
        raise ShapeError(f"batch sizes differ: H {H.shape}, P {P.shape}, y {y.shape}", (H.shape, P.shape, y.shape))
    ids = np.arange(H.shape[0]) if sample_ids is None else np.asarray(sample_ids)

    keep = np.ones(H.shape[0], dtype=bool)
    if skip_degenerate:
        keep = valid_rows(H)
        for row in np.flatnonzero(~keep):
            debug_print(f"DEBUG: sample {int(ids[row])} skipped: feature norm below {DEGENERATE_NORM}")
    d = fca_distances(H[keep], omega)
    yk, Pk = y[keep], P[keep]
    y_hat = np.argmax(Pk, axis=1)
    rows = np.arange(len(yk))
    g = d[rows, yk]
    p = d[rows, y_hat]
    correct = y_hat == yk
    ent = entropies(Pk)

    samples = [
        SampleMetrics(int(i), int(a), int(b), bool(c), float(gv), float(pv), float(e))
        for i, a, b, c, gv, pv, e in zip(ids[keep], yk, y_hat, correct, g, p, ent)
    ]
    stats = MisalignmentStats(
        correct=_group(g[correct], p[correct]),
        wrong=_group(g[~correct], p[~correct]),
        samples=samples,
        skipped=[int(i) for i in ids[~keep]],
    )
    if stats.low_confidence:
        print(f"Warning: only {stats.wrong.count} misclassified samples; wrong-group statistics are low-confidence.")
    return stats


def class_means(H, y, classes):
    H = np.asarray(H, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    counts = np.bincount(y, minlength=classes)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise MissingClassError(f"classes absent from the batch: {missing.tolist()}", missing)
    sums = np.zeros((classes, H.shape[1]))
    np.add.at(sums, y, H)
    return sums / counts[:, None]


def nc3_selfduality(M, omega):
    """|| M/||M||_F - omega/||omega||_F ||_F for centered class means M."""
    M = np.asarray(M, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    if M.shape != omega.shape:
        raise ShapeError(f"class means {M.shape} and classifier {omega.shape} differ", (M.shape, omega.shape))
    m_norm = np.linalg.norm(M)
    w_norm = np.linalg.norm(omega)
    if m_norm < DEGENERATE_NORM or w_norm < DEGENERATE_NORM:
        raise DegenerateVectorError("class means or classifier have zero Frobenius norm")
    return float(np.linalg.norm(M / m_norm - omega / w_norm))


def nc2_terms(M_centered):
    """(equiangularity, ETF deviation) of the pairwise cosines of centered class means."""
    K = M_centered.shape[0]
    U = _unit_rows(M_centered, "centered class mean")
    cos = (U @ U.T)[~np.eye(K, dtype=bool)]
    return float(np.std(cos)), float(np.mean(np.abs(cos + 1.0 / (K - 1))))


def nc_suite(H, y, omega):
    """All collapse metrics for a labelled feature batch; every class must be present.
    nc3plus is the mean G-FCA over rows with a usable norm."""
    H = np.asarray(H, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    omega = np.asarray(omega, dtype=np.float64)
    K = omega.shape[0]
    means = class_means(H, y, K)
    global_mean = H.mean(axis=0)
    M = means - global_mean

    within = H - means[y]
    sigma_w = within.T @ within / H.shape[0]
    sigma_b = M.T @ M / K
    nc1 = float(np.trace(sigma_w @ np.linalg.pinv(sigma_b)) / K)

    equiangularity, etf_deviation = nc2_terms(M)
    nc3 = nc3_selfduality(M, omega)

    nearest_mean = np.argmin(np.linalg.norm(H[:, None, :] - means[None, :, :], axis=-1), axis=1)
    classifier_pick = np.argmax(H @ omega.T, axis=1)
    nc4 = float(np.mean(nearest_mean == classifier_pick))

    keep = valid_rows(H)
    if not np.any(keep):
        raise DegenerateVectorError("every feature row is degenerate", np.arange(H.shape[0]))
    d = fca_distances(H[keep], omega)
    nc3plus = float(np.mean(d[np.arange(d.shape[0]), y[keep]]))

    return NcReport(
        nc1=nc1,
        nc2=equiangularity + etf_deviation,
        nc3=nc3,
        nc4=nc4,
        nc3plus=nc3plus,
        nc2_equiangularity=equiangularity,
        nc2_etf_deviation=etf_deviation,
    )
