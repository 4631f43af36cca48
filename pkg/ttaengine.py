"""Streaming test-time adaptation.

Each batch of the shifted stream is predicted first and adapted on second (online
protocol). The NCTTA objective per sample is

    lambda * [entropy < gamma_ent] * (entropy + alignment loss)

where the alignment loss pulls the feature toward the classifier rows of a hybrid
target set (geometric proximity mixed with predictive confidence) and away from the
rest. lambda and the target set are computed from the pre-update forward and never
carry gradient.
"""
import abc
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

import ncmetrics
import tensorcore as tc
from console import SHUTDOWN_MESSAGE, debug_print, shutdown_requested
from datagen import MAX_SEVERITY, ShiftSpec, apply_shift
from model import TEST_STATS_MOMENTUM, affine_param_names, extractor_param_names, forward, predict

LOSS_VARIANTS = ("infonce", "l2", "triplet")
UPDATE_POLICIES = ("affine_only", "extractor_all")
# Standardization used by the gradient methods: running statistics tracked over the
# stream, the raw batch, or the frozen source statistics
TEST_STATS = ("ema", "batch", "source")
METHODS = ("no_adapt", "bn_adapt", "tent", "nctta")
SCENARIOS = ("mild", "ctta", "bs1")
# Default filter threshold and weight pivot, as a fraction of ln K
ENTROPY_FRACTION = 0.4
STREAM_STREAM = 5
# Keeps positives out of the min over negatives (distances never exceed 2)
_POSITIVE_OFFSET = 4.0


class EmptyNegativeSetError(ValueError):
    """The target set covers every class, so there is nothing to push away from."""


@dataclass
class AdaptConfig:
    alpha: float = 0.5
    epsilon: float = 1.0
    k: int = 2
    gamma_ent: Optional[float] = None
    tau_ent: Optional[float] = None
    nu: float = 1.0
    eta: float = 1.0
    tau_margin: float = 1.0
    loss_variant: str = "infonce"
    update_policy: str = "affine_only"
    lr: float = 0.05
    batch_size: int = 64
    method: str = "nctta"
    ent_weight: float = 1.0
    nc_weight: float = 1.0
    use_filter: bool = True
    use_weight: bool = True
    test_stats: str = "ema"
    stats_momentum: float = TEST_STATS_MOMENTUM

    def resolved(self, classes):
        """Copy with the entropy thresholds filled in for K classes."""
        default = ENTROPY_FRACTION * np.log(classes)
        return replace(
            self,
            gamma_ent=default if self.gamma_ent is None else self.gamma_ent,
            tau_ent=default if self.tau_ent is None else self.tau_ent,
        )

    def validate(self, classes):
        checks = [
            (0.0 <= self.alpha <= 1.0, f"alpha must be in [0, 1], got {self.alpha}"),
            (self.epsilon > 0, f"epsilon must be positive, got {self.epsilon}"),
            (1 <= self.k <= classes, f"k must be in [1, {classes}], got {self.k}"),
            (self.gamma_ent is None or self.gamma_ent > 0, f"gamma_ent must be positive, got {self.gamma_ent}"),
            (self.nu >= 0, f"nu must be >= 0, got {self.nu}"),
            (self.eta >= 0, f"eta must be >= 0, got {self.eta}"),
            (self.tau_margin >= 0, f"tau_margin must be >= 0, got {self.tau_margin}"),
            (self.loss_variant in LOSS_VARIANTS, f"unknown loss variant {self.loss_variant!r}"),
            (self.update_policy in UPDATE_POLICIES, f"unknown update policy {self.update_policy!r}"),
            (self.lr >= 0, f"lr must be >= 0, got {self.lr}"),
            (self.batch_size >= 1, f"batch_size must be >= 1, got {self.batch_size}"),
            (self.method in METHODS, f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}"),
            (self.ent_weight >= 0, f"ent_weight must be >= 0, got {self.ent_weight}"),
            (self.nc_weight >= 0, f"nc_weight must be >= 0, got {self.nc_weight}"),
            (self.test_stats in TEST_STATS, f"unknown test_stats {self.test_stats!r}; expected one of {', '.join(TEST_STATS)}"),
            (0.0 <= self.stats_momentum <= 1.0, f"stats_momentum must be in [0, 1], got {self.stats_momentum}"),
        ]
        for ok, message in checks:
            if not ok:
                raise ValueError(message)
        if self.method == "nctta" and self.nc_weight > 0 and self.k == classes and self.loss_variant != "infonce":
            raise EmptyNegativeSetError(
                f"k = K = {classes} leaves no negatives for the {self.loss_variant} loss"
            )
        return self


@dataclass
class HybridTarget:
    y_tilde: np.ndarray
    order: np.ndarray
    target_set: np.ndarray


@dataclass
class AdaptState:
    params: object
    norm: object

    def copy(self):
        return AdaptState(self.params.copy(), self.norm.copy())


@dataclass
class StepLog:
    step: int
    segment: int
    n: int
    batch_accuracy: float
    pass_count: int
    mean_lambda: Optional[float]
    mean_l_ent: float
    mean_l_nc: Optional[float]
    mean_gfca: Optional[float]
    mean_pfca: Optional[float]
    loss: Optional[float]
    skipped: Optional[str] = None
    predictions: np.ndarray = field(default=None, repr=False)
    features: np.ndarray = field(default=None, repr=False)


@dataclass(frozen=True)
class Scenario:
    name: str
    shift: str = "gaussian_noise"
    severity: int = 3
    severities: tuple = tuple(range(1, MAX_SEVERITY + 1))
    shifts: tuple = ()

    def __post_init__(self):
        if self.name not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.name!r}; expected one of {', '.join(SCENARIOS)}")
        if self.name == "ctta" and not (self.severities or self.shifts):
            raise ValueError("ctta needs a severity sequence or a list of shift kinds")

    def segments(self, seed):
        """The ShiftSpecs streamed one after another."""
        if self.name != "ctta":
            return [ShiftSpec(self.shift, self.severity, seed)]
        if self.shifts:
            return [ShiftSpec(kind, self.severity, seed) for kind in self.shifts]
        return [ShiftSpec(self.shift, severity, seed) for severity in self.severities]

    def describe(self):
        if self.name == "ctta" and self.shifts:
            return f"ctta({','.join(self.shifts)}@{self.severity})"
        if self.name == "ctta":
            return f"ctta({self.shift}@{'>'.join(str(s) for s in self.severities)})"
        return f"{self.name}({self.shift}@{self.severity})"


@dataclass
class SegmentSummary:
    index: int
    shift: str
    severity: int
    n: int
    accuracy: float
    per_class_accuracy: List[Optional[float]]
    worst_class_accuracy: float
    mean_gfca: Optional[float]
    mean_pfca: Optional[float]


@dataclass
class RunLog:
    method: str
    scenario: str
    seed: int
    steps: List[StepLog] = field(default_factory=list)
    segments: List[SegmentSummary] = field(default_factory=list)
    interrupted: bool = False
    state: Optional[AdaptState] = None
    features: Optional[np.ndarray] = None
    feature_ids: Optional[np.ndarray] = None
    feature_labels: Optional[np.ndarray] = None
    feature_predictions: Optional[np.ndarray] = None

    @property
    def accuracy(self):
        """Stream accuracy over every segment."""
        total = sum(s.n for s in self.segments)
        if not total:
            return 0.0
        return sum(s.accuracy * s.n for s in self.segments) / total


# --- objective ---

def entropy(p):
    """-sum p log p with 0 log 0 = 0."""
    return float(ncmetrics.entropies(np.asarray(p, dtype=np.float64)))


def entropy_filter(entropies, gamma_ent):
    if not gamma_ent > 0:
        raise ValueError(f"gamma_ent must be positive, got {gamma_ent}")
    return np.asarray(entropies, dtype=np.float64) < gamma_ent


def hybrid_target(d, p, alpha, epsilon, k):
    """Rank classes by (1-alpha) exp(-d/epsilon) + alpha p and keep the top k.
    Ties go to the lowest class index. The score is not renormalized."""
    d = np.asarray(d, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    y_tilde = (1.0 - alpha) * np.exp(-d / epsilon) + alpha * p
    order = np.argsort(-y_tilde, axis=-1, kind="stable")
    return HybridTarget(y_tilde, order, order[..., :k])


def sample_weight(l_ent, pfca, tau_ent, nu, eta):
    """exp(tau_ent - l_ent) + nu / (1 + eta * pfca); a constant weight, never differentiated."""
    with np.errstate(over="ignore"):
        return np.exp(-(np.asarray(l_ent) - tau_ent)) + nu / (1.0 + eta * np.asarray(pfca))


def _positive_mask(target_sets, classes):
    target_sets = np.atleast_2d(target_sets)
    mask = np.zeros((target_sets.shape[0], classes))
    np.put_along_axis(mask, target_sets, 1.0, axis=1)
    return mask


def _alignment_core(cos, dist, pos, variant, tau_margin):
    """Per-row alignment loss from cosines and FCA distances (both (B, K)).
    pos is a constant 0/1 mask of the target set."""
    pos = np.asarray(pos, dtype=np.float64)
    neg = 1.0 - pos
    n_pos = pos.sum(axis=1)
    n_neg = neg.sum(axis=1)
    if variant == "infonce":
        numerator = tc.sum(tc.mul(tc.exp(cos), pos), axis=1)
        denominator = tc.sum(tc.exp(cos), axis=1)
        return tc.add(tc.sub(tc.log(denominator), tc.log(numerator)), np.log(n_pos))
    if variant not in LOSS_VARIANTS:
        raise ValueError(f"unknown loss variant {variant!r}")
    if np.any(n_neg == 0):
        raise EmptyNegativeSetError(f"target set covers all {pos.shape[1]} classes; {variant} needs negatives")
    mean_pos = tc.mul(tc.sum(tc.mul(dist, pos), axis=1), 1.0 / n_pos)
    if variant == "l2":
        mean_neg = tc.mul(tc.sum(tc.mul(dist, neg), axis=1), 1.0 / n_neg)
        return tc.sub(mean_pos, mean_neg)
    min_neg = tc.mul(tc.max(tc.sub(tc.mul(dist, -1.0), _POSITIVE_OFFSET * pos), axis=1), -1.0)
    return tc.relu(tc.add(tc.sub(mean_pos, min_neg), tau_margin))


def _unit_classifier(omega):
    return tc.l2_normalize(omega, axis=1)


def _cosines_and_distances(H, omega):
    cos = tc.matmul(tc.l2_normalize(H, axis=1), tc.transpose(_unit_classifier(omega)))
    dist = tc.sqrt(tc.relu(tc.sub(2.0, tc.mul(cos, 2.0))))
    return cos, dist


def loss_nc(h, omega, target_set, variant="infonce", tau_margin=1.0):
    """Alignment loss of one feature vector against the classifier rows.
    Differentiable in h (and in omega when it is a Node)."""
    H = _as_row(h)
    classes = tc.as_array(omega).shape[0]
    pos = _positive_mask(np.asarray(target_set, dtype=np.int64).reshape(1, -1), classes)
    cos, dist = _cosines_and_distances(H, omega)
    return tc.sum(_alignment_core(cos, dist, pos, variant, tau_margin))


def loss_nc_from_distances(d, target_set, variant="infonce", tau_margin=1.0):
    """The same loss written in terms of the FCA distance vector (cos = 1 - d^2/2)."""
    D = _as_row(d)
    classes = tc.as_array(D).shape[1]
    pos = _positive_mask(np.asarray(target_set, dtype=np.int64).reshape(1, -1), classes)
    cos = tc.sub(1.0, tc.mul(tc.mul(D, D), 0.5))
    return tc.sum(_alignment_core(cos, D, pos, variant, tau_margin))


def _as_row(v):
    if tc.as_array(v).ndim == 2:
        return v
    return tc.reshape(v, (1, -1))


@dataclass
class BatchObjective:
    loss: object
    entropies: np.ndarray
    passed: np.ndarray
    usable: np.ndarray
    weights: np.ndarray
    l_nc: np.ndarray
    distances: np.ndarray
    predictions: np.ndarray

    @property
    def pass_count(self):
        return int(np.sum(self.passed & self.usable))


def total_loss(H, Z, omega, cfg, sample_ids=None):
    """Filtered, weighted mean of entropy plus alignment loss over the batch.
    Args:
        H, Z: features and logits from the pre-update forward (Nodes or arrays)
        omega: classifier (array; frozen during adaptation)
        cfg: resolved AdaptConfig
        sample_ids: ids used in log lines
    Returns: BatchObjective; samples that fail the filter or have a degenerate feature
    contribute exactly 0 and no gradient
    """
    Hv, Zv = tc.as_array(H), tc.as_array(Z)
    batch, classes = Zv.shape
    if batch == 0:
        raise ValueError("empty batch")
    ids = np.arange(batch) if sample_ids is None else np.asarray(sample_ids)

    log_p = tc.log_softmax(Z)
    ent = tc.mul(tc.sum(tc.mul(tc.exp(log_p), log_p), axis=1), -1.0)
    ent_v = tc.as_array(ent)
    P = np.exp(tc.as_array(log_p))
    y_hat = np.argmax(P, axis=1)

    usable = ncmetrics.valid_rows(Hv)
    for row in np.flatnonzero(~usable):
        debug_print(f"DEBUG: sample {int(ids[row])} skipped: feature norm below {tc.DEGENERATE_NORM}")
    passed = entropy_filter(ent_v, cfg.gamma_ent) if cfg.use_filter else np.ones(batch, dtype=bool)

    d = np.full((batch, classes), np.nan)
    if np.any(usable):
        d[usable] = ncmetrics.fca_distances(Hv[usable], omega)
    pfca = np.where(usable, d[np.arange(batch), y_hat], 0.0)
    if cfg.use_weight:
        weights = np.where(usable, sample_weight(ent_v, pfca, cfg.tau_ent, cfg.nu, cfg.eta), 0.0)
    else:
        weights = usable.astype(np.float64)
    coeff = np.where(passed & usable, weights, 0.0)

    loss = tc.sum(tc.mul(ent, coeff * cfg.ent_weight))
    l_nc = np.full(batch, np.nan)
    rows = np.flatnonzero(usable)
    if rows.size and cfg.nc_weight > 0:
        targets = hybrid_target(d[rows], P[rows], cfg.alpha, cfg.epsilon, cfg.k).target_set
        pos = _positive_mask(targets, classes)
        cos, dist = _cosines_and_distances(tc.index_select(H, rows, axis=0), omega)
        per_sample = _alignment_core(cos, dist, pos, cfg.loss_variant, cfg.tau_margin)
        l_nc[rows] = tc.as_array(per_sample)
        loss = tc.add(loss, tc.sum(tc.mul(per_sample, coeff[rows] * cfg.nc_weight)))
    loss = tc.mul(loss, 1.0 / batch)

    return BatchObjective(
        loss=loss,
        entropies=ent_v,
        passed=passed,
        usable=usable,
        weights=weights,
        l_nc=l_nc,
        distances=d,
        predictions=y_hat,
    )


# --- adapters ---

def _mean_or_none(values):
    values = np.asarray(values, dtype=np.float64)
    values = values[np.isfinite(values)]
    return float(values.mean()) if values.size else None


def _fca_diagnostics(H, omega, y, y_hat):
    """(mean G-FCA, mean P-FCA) over rows with a usable norm."""
    usable = ncmetrics.valid_rows(H)
    if not np.any(usable):
        return None, None
    d = ncmetrics.fca_distances(H[usable], omega)
    rows = np.arange(d.shape[0])
    return float(d[rows, y[usable]].mean()), float(d[rows, y_hat[usable]].mean())


class Adapter(abc.ABC):
    def __init__(self, cfg):
        self.cfg = cfg

    @abc.abstractmethod
    def step(self, state, x, y, step=0, segment=0, eval_stats=False):
        """Predict the batch, then adapt. Returns: (AdaptState, StepLog)"""

    def _passive_log(self, state, out, y, step, segment):
        H, P = tc.as_array(out.H), tc.as_array(out.P)
        y_hat = np.argmax(P, axis=1)
        gfca, pfca = _fca_diagnostics(H, state.params.classifier, y, y_hat)
        return StepLog(
            step=step,
            segment=segment,
            n=len(y),
            batch_accuracy=float(np.mean(y_hat == y)),
            pass_count=0,
            mean_lambda=None,
            mean_l_ent=float(np.mean(ncmetrics.entropies(P))),
            mean_l_nc=None,
            mean_gfca=gfca,
            mean_pfca=pfca,
            loss=None,
            predictions=y_hat,
            features=H,
        )


class NoAdapt(Adapter):
    def step(self, state, x, y, step=0, segment=0, eval_stats=False):
        return state, self._passive_log(state, predict(state.params, state.norm, x), y, step, segment)


class BnAdapt(Adapter):
    """Standardize with the test batch's own statistics; no gradient step."""

    def step(self, state, x, y, step=0, segment=0, eval_stats=False):
        if eval_stats or len(y) < 2:
            out = predict(state.params, state.norm, x)
        else:
            out = forward(state.params, state.norm, x, mode="train", update_stats=False)
        return state, self._passive_log(state, out, y, step, segment)


class GradientAdapter(Adapter):
    """One plain gradient-descent step on the batch objective per batch."""

    def trainable(self, params):
        if self.cfg.update_policy == "extractor_all":
            return extractor_param_names(params)
        return affine_param_names(params)

    def _forward(self, state, x, tape, names, eval_stats):
        """Recorded forward under cfg.test_stats. Returns: (ForwardResult, NormState for the next batch)"""
        cfg = self.cfg
        params = state.params
        if cfg.test_stats == "ema":
            norm = state.norm.copy()
            if eval_stats:
                # Predict with the running statistics, then fold the sample in
                out = forward(params, state.norm, x, mode="eval", tape=tape, trainable=names)
                forward(params, norm, x, mode="test", stats_momentum=cfg.stats_momentum)
                return out, norm
            out = forward(params, norm, x, mode="test", tape=tape, trainable=names, stats_momentum=cfg.stats_momentum)
            return out, norm
        mode = "eval" if cfg.test_stats == "source" or eval_stats or len(x) < 2 else "train"
        return forward(params, state.norm, x, mode=mode, tape=tape, trainable=names, update_stats=False), state.norm

    def step(self, state, x, y, step=0, segment=0, eval_stats=False):
        cfg = self.cfg
        params = state.params
        names = self.trainable(params)
        tape = tc.Tape()
        out, norm = self._forward(state, x, tape, names, eval_stats)
        kept = state if norm is state.norm else AdaptState(params, norm)
        objective = total_loss(out.H, out.Z, params.classifier, cfg)
        y_hat = objective.predictions
        gfca, pfca = _fca_diagnostics(tc.as_array(out.H), params.classifier, y, y_hat)
        contributing = objective.passed & objective.usable
        log = StepLog(
            step=step,
            segment=segment,
            n=len(y),
            batch_accuracy=float(np.mean(y_hat == y)),
            pass_count=objective.pass_count,
            mean_lambda=_mean_or_none(objective.weights[objective.usable]),
            mean_l_ent=float(np.mean(objective.entropies)),
            mean_l_nc=_mean_or_none(objective.l_nc) if cfg.nc_weight > 0 else None,
            mean_gfca=gfca,
            mean_pfca=pfca,
            loss=float(tc.as_array(objective.loss)),
            predictions=y_hat,
            features=tc.as_array(out.H),
        )
        if not np.any(contributing):
            print(f"Step {step}: all {len(y)} samples filtered out, no update.")
            log.skipped = "all_filtered"
            return kept, log
        try:
            grads = tc.backward(tape, objective.loss)
        except tc.NonFiniteError as e:
            print(f"Warning: step {step}: non-finite gradients ({e}), update skipped.")
            log.skipped = "non_finite"
            return kept, log
        if not all(np.all(np.isfinite(grads[name])) for name in names):
            print(f"Warning: step {step}: non-finite gradients, update skipped.")
            log.skipped = "non_finite"
            return kept, log
        arrays = params.named_arrays()
        updated = {name: arrays[name] - cfg.lr * grads[name] for name in names}
        return AdaptState(params.with_arrays(updated), norm), log


class Tent(GradientAdapter):
    """Entropy minimization: no alignment term, no filter, unit weights."""

    def __init__(self, cfg):
        super().__init__(replace(cfg, nc_weight=0.0, use_filter=False, use_weight=False))


class Nctta(GradientAdapter):
    pass


def get_adapter(method, cfg):
    if method == "no_adapt":
        return NoAdapt(cfg)
    elif method == "bn_adapt":
        return BnAdapt(cfg)
    elif method == "tent":
        return Tent(cfg)
    elif method == "nctta":
        return Nctta(cfg)
    else:
        raise ValueError(f"Unknown method: {method}")


def adapt_step(state, x, y, cfg, step=0, segment=0, eval_stats=False):
    """Predict one batch with the current state, then adapt according to cfg.method.
    Labels are only used for the logged accuracy and FCA diagnostics."""
    classes = state.params.classifier.shape[0]
    cfg = cfg.resolved(classes).validate(classes)
    return get_adapter(cfg.method, cfg).step(state, np.atleast_2d(x), np.atleast_1d(y), step, segment, eval_stats)


# --- scenarios ---

def _segment_summary(index, spec, y, y_hat, steps, classes):
    correct = y_hat == y
    per_class = []
    for c in range(classes):
        members = y == c
        per_class.append(float(correct[members].mean()) if np.any(members) else None)
    present = [a for a in per_class if a is not None]
    weights = [s.n for s in steps]
    gfcas = [s.mean_gfca for s in steps]
    pfcas = [s.mean_pfca for s in steps]

    def weighted(values):
        pairs = [(v, w) for v, w in zip(values, weights) if v is not None]
        if not pairs:
            return None
        return sum(v * w for v, w in pairs) / sum(w for _, w in pairs)

    return SegmentSummary(
        index=index,
        shift=spec.kind,
        severity=spec.severity,
        n=int(len(y)),
        accuracy=float(correct.mean()) if len(y) else 0.0,
        per_class_accuracy=per_class,
        worst_class_accuracy=min(present) if present else 0.0,
        mean_gfca=weighted(gfcas),
        mean_pfca=weighted(pfcas),
    )


def run_scenario(params, norm, source, scenario, cfg, seed=0, keep_features=False, verbose=True):
    """Stream shifted copies of a severity-0 test set through an adapter.
    Args:
        params, norm: trained model (not modified)
        source: unshifted test Dataset
        scenario: Scenario; ctta segments follow each other with no reset
        cfg: AdaptConfig (cfg.method picks the adapter)
        seed: stream order and shift randomness
        keep_features: collect pre-update features for projection
    Returns: RunLog
    """
    classes = source.num_classes
    cfg = cfg.resolved(classes).validate(classes)
    bs1 = scenario.name == "bs1"
    batch_size = 1 if bs1 else cfg.batch_size
    if bs1:
        # batch_size single-sample steps move the model about as far as one batch step
        cfg = replace(cfg, lr=cfg.lr / cfg.batch_size, stats_momentum=cfg.stats_momentum / cfg.batch_size)
        debug_print(f"DEBUG: bs1 step lr {cfg.lr:.3g}, stats momentum {cfg.stats_momentum:.3g}")
    adapter = get_adapter(cfg.method, cfg)
    omega_before = params.classifier.copy()
    state = AdaptState(params.copy(), norm.copy())
    rng = tc.make_rng(seed, STREAM_STREAM)
    log = RunLog(method=cfg.method, scenario=scenario.describe(), seed=int(seed))
    features, ids, labels, predictions = [], [], [], []
    step = 0
    offset = 0

    for seg_index, spec in enumerate(scenario.segments(seed)):
        shifted = apply_shift(source, spec)
        order = rng.permutation(len(shifted))
        seg_y, seg_pred, seg_steps = [], [], []
        for start in range(0, len(order), batch_size):
            if shutdown_requested():
                print(SHUTDOWN_MESSAGE)
                log.interrupted = True
                break
            idx = order[start:start + batch_size]
            y = shifted.y[idx]
            state, step_log = adapter.step(state, shifted.x[idx], y, step, seg_index, eval_stats=bs1)
            seg_y.append(y)
            seg_pred.append(step_log.predictions)
            seg_steps.append(step_log)
            if keep_features:
                features.append(step_log.features)
                ids.append(offset + idx)
                labels.append(y)
                predictions.append(step_log.predictions)
            step_log.features = None
            step += 1
        log.steps.extend(seg_steps)
        if seg_steps:
            y_all, pred_all = np.concatenate(seg_y), np.concatenate(seg_pred)
            summary = _segment_summary(seg_index, spec, y_all, pred_all, seg_steps, classes)
            log.segments.append(summary)
            if verbose:
                print(
                    f"  [{cfg.method}] segment {seg_index + 1} {spec.kind}@{spec.severity}: "
                    f"accuracy {summary.accuracy:.4f} (worst class {summary.worst_class_accuracy:.4f})"
                )
        offset += len(shifted)
        if log.interrupted:
            break

    if not np.array_equal(state.params.classifier, omega_before):
        raise RuntimeError("classifier weights changed during adaptation")
    log.state = state
    if keep_features and features:
        log.features = np.concatenate(features)
        log.feature_ids = np.concatenate(ids)
        log.feature_labels = np.concatenate(labels)
        log.feature_predictions = np.concatenate(predictions)
    return log
