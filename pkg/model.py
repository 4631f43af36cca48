"""The network under study: an MLP feature extractor with batch standardization and
learnable affine after every linear layer, followed by a bias-free linear classifier.

Also holds supervised training into the terminal phase of training (TPT) and the
versioned checkpoint format.
"""
import struct
import zlib
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

import ncmetrics
import tensorcore as tc
from console import SHUTDOWN_MESSAGE, debug_print, shutdown_requested

NORM_MOMENTUM = 0.1
NORM_EPS = 1e-5
INIT_STREAM = 4
SHUFFLE_STREAM = 2
PROGRESS_EVERY = 25

ACTIVATIONS = {
    "relu": tc.relu,
    "tanh": tc.tanh,
    "identity": lambda a: a,
}
# Test-time statistics: fold the batch into the running ones, then standardize
TEST_STATS_MOMENTUM = 0.1

CHECKPOINT_MAGIC = b"NCCK"
CHECKPOINT_FORMAT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHIIII")
_CKPT_NORM = struct.Struct("<dd")
_CRC = struct.Struct("<I")


class CheckpointError(ValueError):
    """Checkpoint file is truncated, corrupted or from another format version."""


class TrainingDivergedError(RuntimeError):
    """The training loss stopped being finite (usually a learning rate that is too high)."""


@dataclass
class Layer:
    weight: np.ndarray  # (in, out)
    scale: np.ndarray  # (out,)
    shift: np.ndarray  # (out,)
    activation: str = "relu"


@dataclass
class ModelParams:
    layers: List[Layer]
    classifier: np.ndarray  # omega, (K, L), no bias

    def __post_init__(self):
        if not self.layers:
            raise ValueError("the feature extractor needs at least one layer")
        width = self.layers[0].weight.shape[0]
        for i, layer in enumerate(self.layers):
            if layer.weight.ndim != 2 or layer.weight.shape[0] != width:
                raise tc.ShapeError(
                    f"layer {i} weight {layer.weight.shape} does not chain from width {width}",
                    (layer.weight.shape,),
                )
            width = layer.weight.shape[1]
            if layer.scale.shape != (width,) or layer.shift.shape != (width,):
                raise tc.ShapeError(f"layer {i} affine parameters must have shape ({width},)")
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"layer {i}: unknown activation {layer.activation!r}")
        if self.classifier.ndim != 2 or self.classifier.shape[1] != width:
            raise tc.ShapeError(
                f"classifier {self.classifier.shape} does not match feature width {width}",
                (self.classifier.shape,),
            )
        for name, arr in self.named_arrays().items():
            if not np.all(np.isfinite(arr)):
                raise tc.NonFiniteError(f"parameter {name} is not finite")

    @property
    def dims(self):
        """(D input, L feature, K classes)"""
        return self.layers[0].weight.shape[0], self.classifier.shape[1], self.classifier.shape[0]

    def named_arrays(self):
        arrays = {}
        for i, layer in enumerate(self.layers):
            arrays[f"layer{i}.weight"] = layer.weight
            arrays[f"layer{i}.scale"] = layer.scale
            arrays[f"layer{i}.shift"] = layer.shift
        arrays["classifier"] = self.classifier
        return arrays

    def with_arrays(self, arrays):
        """New parameters with the named arrays replaced."""
        current = {**self.named_arrays(), **arrays}
        layers = [
            Layer(
                current[f"layer{i}.weight"],
                current[f"layer{i}.scale"],
                current[f"layer{i}.shift"],
                layer.activation,
            )
            for i, layer in enumerate(self.layers)
        ]
        return ModelParams(layers, current["classifier"])

    def copy(self):
        return self.with_arrays({name: arr.copy() for name, arr in self.named_arrays().items()})


@dataclass
class NormState:
    running_mean: List[np.ndarray]
    running_var: List[np.ndarray]
    momentum: float = NORM_MOMENTUM
    eps: float = NORM_EPS

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"epsilon must be positive, got {self.eps}")
        for i, var in enumerate(self.running_var):
            if np.any(var <= 0):
                raise ValueError(f"running variance of layer {i} must be positive")

    def copy(self):
        return NormState(
            [m.copy() for m in self.running_mean],
            [v.copy() for v in self.running_var],
            self.momentum,
            self.eps,
        )


@dataclass
class ForwardResult:
    H: object  # features (B, L)
    Z: object  # logits (B, K)
    P: object  # probabilities (B, K)


@dataclass
class TrainConfig:
    hidden: tuple = (32, 32)
    epochs: int = 300
    lr: float = 0.05
    batch_size: int = 64
    momentum: float = 0.9
    # Applied to scale, shift and classifier only (see decayed_param_names)
    weight_decay: float = 5e-3
    post_zero_epochs: int = 100
    max_epochs: int = 1000
    seed: int = 0
    activation: str = "relu"
    # Last extractor layer; signed features can line up with signed classifier rows
    feature_activation: str = "identity"


@dataclass
class EpochRecord:
    epoch: int
    train_accuracy: float
    train_loss: float
    mean_gfca: float
    nc1: float
    nc2: float
    nc3: float
    nc4: float


@dataclass
class TrainTrace:
    records: List[EpochRecord] = field(default_factory=list)
    first_zero_error_epoch: Optional[int] = None
    interrupted: bool = False


def affine_param_names(params):
    names = []
    for i in range(len(params.layers)):
        names += [f"layer{i}.scale", f"layer{i}.shift"]
    return names


def extractor_param_names(params):
    return [name for name in params.named_arrays() if name != "classifier"]


def decayed_param_names(params):
    """Parameters that get weight decay during training.
    Linear weights feed a batch standardization, so the loss does not depend on their scale."""
    return affine_param_names(params) + ["classifier"]


def init_params(input_dim, hidden, classes, seed, activation="relu", feature_activation=None):
    """He-initialized extractor, unit affine, N(0, 1/L) classifier, fresh norm state.
    feature_activation overrides the activation of the last layer (default: same as the others)."""
    for tag in (activation, feature_activation):
        if tag is not None and tag not in ACTIVATIONS:
            raise ValueError(f"unknown activation {tag!r}; expected one of {', '.join(ACTIVATIONS)}")
    rng = tc.make_rng(seed, INIT_STREAM)
    layers, means, variances = [], [], []
    width = input_dim
    for i, out in enumerate(hidden):
        weight = rng.standard_normal((width, out)) * np.sqrt(2.0 / width)
        tag = feature_activation if i == len(hidden) - 1 and feature_activation is not None else activation
        layers.append(Layer(weight, np.ones(out), np.zeros(out), tag))
        means.append(np.zeros(out))
        variances.append(np.ones(out))
        width = out
    classifier = rng.standard_normal((classes, width)) / np.sqrt(width)
    return ModelParams(layers, classifier), NormState(means, variances)


def fold_moments(mean, var, batch_mean, batch_var, momentum):
    """Running moments after mixing in a batch with weight `momentum`.
    The variance is that of the mixture, so a single sample (batch_var = 0) still moves it."""
    new_mean = (1.0 - momentum) * mean + momentum * batch_mean
    new_var = (1.0 - momentum) * var + momentum * batch_var + momentum * (1.0 - momentum) * (batch_mean - mean) ** 2
    return new_mean, new_var


def forward(params, norm, x, mode="eval", tape=None, trainable=(), update_stats=None, stats_momentum=None):
    """h = extractor(x), Z = H omega^T, P = softmax(Z).
    Args:
        params: ModelParams
        norm: NormState; updated in place when train or test mode updates statistics
        x: (B, D) batch, or a single (D,) sample
        mode: "train" standardizes with batch statistics, "eval" with running statistics,
            "test" folds the batch into the running statistics first and standardizes with
            the result (treated as constants, any batch size)
        tape: record on this tape; parameters listed in `trainable` become tape params
        update_stats: whether train/test mode writes the new statistics back to `norm`
            (default: yes in train and test mode)
        stats_momentum: test-mode weight of the batch (default TEST_STATS_MOMENTUM)
    Returns: ForwardResult of Nodes when anything was recorded, else of arrays
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    input_dim = params.dims[0]
    if x.ndim != 2 or x.shape[1] != input_dim:
        raise tc.ShapeError(f"input batch {x.shape} does not match input dimension {input_dim}", (x.shape,))
    batch = x.shape[0]
    if batch == 0:
        raise ValueError("empty batch")
    if mode not in ("train", "eval", "test"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "train" and batch < 2:
        raise ValueError("batch size 1 in train mode: batch statistics are undefined, use eval mode")
    if update_stats is None:
        update_stats = mode != "eval"
    if stats_momentum is None:
        stats_momentum = TEST_STATS_MOMENTUM
    if not 0.0 <= stats_momentum <= 1.0:
        raise ValueError(f"stats_momentum must be in [0, 1], got {stats_momentum}")
    trainable = set(trainable)

    def source(name, value):
        if tape is not None and name in trainable:
            return tape.param(value, name)
        return value

    h = x
    for i, layer in enumerate(params.layers):
        a = tc.matmul(h, source(f"layer{i}.weight", layer.weight))
        if mode == "train":
            s = tc.batch_standardize(a, norm.eps)
            if update_stats:
                mu, var = tc.batch_moments(a)
                m = norm.momentum
                norm.running_mean[i] = (1.0 - m) * norm.running_mean[i] + m * mu
                norm.running_var[i] = (1.0 - m) * norm.running_var[i] + m * var * batch / (batch - 1)
        elif mode == "test":
            mu, var = tc.batch_moments(a)
            mean, var = fold_moments(norm.running_mean[i], norm.running_var[i], mu, var, stats_momentum)
            if update_stats:
                norm.running_mean[i], norm.running_var[i] = mean, var
            s = tc.mul(tc.sub(a, mean), 1.0 / np.sqrt(var + norm.eps))
        else:
            inv_std = 1.0 / np.sqrt(norm.running_var[i] + norm.eps)
            s = tc.mul(tc.sub(a, norm.running_mean[i]), inv_std)
        s = tc.add(tc.mul(s, source(f"layer{i}.scale", layer.scale)), source(f"layer{i}.shift", layer.shift))
        h = ACTIVATIONS[layer.activation](s)

    omega = source("classifier", params.classifier)
    Z = tc.matmul(h, tc.transpose(omega))
    return ForwardResult(h, Z, tc.softmax(Z))


def predict(params, norm, x):
    """Eval-mode forward returning plain arrays; read-only, safe to share across threads."""
    return forward(params, norm, x, mode="eval")


def cross_entropy(Z, onehot):
    """Mean of -log p_y over the batch (differentiable when Z is a Node)."""
    return tc.mean(tc.mul(tc.sum(tc.mul(tc.log_softmax(Z), onehot), axis=1), -1.0))


def evaluate_epoch(params, norm, d, epoch):
    out = predict(params, norm, d.x)
    onehot = np.eye(d.num_classes)[d.y]
    loss = float(cross_entropy(out.Z, onehot))
    accuracy = float(np.mean(np.argmax(out.P, axis=1) == d.y))
    report = ncmetrics.nc_suite(out.H, d.y, params.classifier)
    return EpochRecord(
        epoch=epoch,
        train_accuracy=accuracy,
        train_loss=loss,
        mean_gfca=report.nc3plus,
        nc1=report.nc1,
        nc2=report.nc2,
        nc3=report.nc3,
        nc4=report.nc4,
    )


def train_to_tpt(params, norm, d, cfg, verbose=True):
    """Mini-batch gradient descent on cross-entropy into the terminal phase.
    Runs at least cfg.epochs epochs and keeps going until cfg.post_zero_epochs epochs
    have passed since the first zero-train-error epoch (capped at cfg.max_epochs).
    Raises TrainingDivergedError for non-finite values or all-zero features. A training
    set that lacks a class raises ncmetrics.MissingClassError unchanged: that is a data
    error, not a training one.
    Returns: (ModelParams, NormState, TrainTrace); the inputs are not modified.
    """
    params, norm = params.copy(), norm.copy()
    names = list(params.named_arrays())
    decayed = set(decayed_param_names(params))
    velocity = {name: np.zeros_like(arr) for name, arr in params.named_arrays().items()}
    rng = tc.make_rng(cfg.seed, SHUFFLE_STREAM)
    onehot = np.eye(d.num_classes)[d.y]
    trace = TrainTrace()
    budget = cfg.epochs
    epoch = 0
    last_loss = None

    while epoch < budget:
        if shutdown_requested():
            print(SHUTDOWN_MESSAGE)
            trace.interrupted = True
            break
        epoch += 1
        order = rng.permutation(len(d))
        for batch_index, start in enumerate(range(0, len(d), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            tape = tc.Tape()
            try:
                out = forward(params, norm, d.x[idx], mode="train", tape=tape, trainable=names)
                loss = cross_entropy(out.Z, onehot[idx])
                grads = tc.backward(tape, loss)
            except tc.NonFiniteError as e:
                raise TrainingDivergedError(
                    f"non-finite values at epoch {epoch}, batch {batch_index} (lr={cfg.lr}, "
                    f"last finite loss={last_loss}); lower the learning rate"
                ) from e
            last_loss = float(loss.value)
            arrays = params.named_arrays()
            updated = {}
            for name in names:
                g = grads[name] + cfg.weight_decay * arrays[name] if name in decayed else grads[name]
                velocity[name] = cfg.momentum * velocity[name] + g
                updated[name] = arrays[name] - cfg.lr * velocity[name]
            if not all(np.all(np.isfinite(arr)) for arr in updated.values()):
                raise TrainingDivergedError(
                    f"parameters diverged at epoch {epoch}, batch {batch_index} (lr={cfg.lr}, "
                    f"last finite loss={last_loss}); lower the learning rate"
                )
            params = params.with_arrays(updated)

        try:
            record = evaluate_epoch(params, norm, d, epoch)
        except (tc.NonFiniteError, np.linalg.LinAlgError) as e:
            raise TrainingDivergedError(
                f"non-finite evaluation after epoch {epoch} (lr={cfg.lr}, last finite loss={last_loss}); "
                "lower the learning rate"
            ) from e
        except tc.DegenerateVectorError as e:
            raise TrainingDivergedError(
                f"features collapsed to zero after epoch {epoch} (lr={cfg.lr}, weight_decay={cfg.weight_decay}): {e}"
            ) from e
        trace.records.append(record)
        if record.train_accuracy == 1.0 and trace.first_zero_error_epoch is None:
            trace.first_zero_error_epoch = epoch
            budget = max(budget, min(cfg.max_epochs, epoch + cfg.post_zero_epochs))
            debug_print(f"DEBUG: zero train error reached at epoch {epoch}; training until epoch {budget}")
        debug_print(
            f"DEBUG: epoch {epoch}: acc={record.train_accuracy:.4f} loss={record.train_loss:.5f} "
            f"gfca={record.mean_gfca:.4f} nc1={record.nc1:.4f} nc3={record.nc3:.4f}"
        )
        if verbose and (epoch % PROGRESS_EVERY == 0 or epoch == budget):
            print(
                f"Epoch {epoch}/{budget}: train accuracy {record.train_accuracy:.4f}, "
                f"loss {record.train_loss:.5f}, mean G-FCA {record.mean_gfca:.4f}"
            )

    if trace.first_zero_error_epoch is None and not trace.interrupted:
        print(f"Warning: zero train error never reached in {epoch} epochs; the run did not enter TPT.")
    return params, norm, trace


# --- checkpoints ---

def _pack_tensor(arr):
    arr = np.asarray(arr, dtype=np.float64)
    return (
        struct.pack("<B", arr.ndim)
        + struct.pack(f"<{arr.ndim}I", *arr.shape)
        + arr.astype("<f8").tobytes(order="C")
    )


class _Reader:
    def __init__(self, raw, path):
        self.raw = raw
        self.path = path
        self.offset = 0

    def take(self, size):
        if self.offset + size > len(self.raw):
            raise CheckpointError(f"{self.path}: checkpoint truncated at byte {self.offset}")
        chunk = self.raw[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt):
        fmt = struct.Struct(fmt)
        return fmt.unpack(self.take(fmt.size))

    def tensor(self):
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(self.take(8 * count), dtype="<f8")
        return data.astype(np.float64).reshape(shape)


def save_checkpoint(params, norm, path):
    """Write params and norm state; load_checkpoint(path) gives them back bit-equal."""
    input_dim, feature_dim, classes = params.dims
    chunks = [
        _CKPT_HEADER.pack(
            CHECKPOINT_MAGIC, CHECKPOINT_FORMAT_VERSION, input_dim, feature_dim, classes, len(params.layers)
        ),
        _CKPT_NORM.pack(norm.momentum, norm.eps),
    ]
    for i, layer in enumerate(params.layers):
        tag = layer.activation.encode("ascii")
        chunks.append(struct.pack("<H", len(tag)) + tag)
        for arr in (layer.weight, layer.scale, layer.shift, norm.running_mean[i], norm.running_var[i]):
            chunks.append(_pack_tensor(arr))
    chunks.append(_pack_tensor(params.classifier))
    body = b"".join(chunks)
    with open(path, "wb") as f:
        f.write(body)
        f.write(_CRC.pack(zlib.crc32(body) & 0xFFFFFFFF))
    return path


def load_checkpoint(path):
    """Read a checkpoint. Nothing is constructed until the whole file has validated.
    Returns: (ModelParams, NormState)"""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _CKPT_HEADER.size + _CRC.size:
        raise CheckpointError(f"{path}: checkpoint truncated ({len(raw)} bytes)")
    magic, version, input_dim, feature_dim, classes, n_layers = _CKPT_HEADER.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {CHECKPOINT_FORMAT_VERSION}")
    body, (crc,) = raw[:-_CRC.size], _CRC.unpack_from(raw, len(raw) - _CRC.size)
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")

    reader = _Reader(body, path)
    reader.take(_CKPT_HEADER.size)
    momentum, eps = reader.unpack(_CKPT_NORM.format)
    raw_layers = []
    for _ in range(n_layers):
        (tag_len,) = reader.unpack("<H")
        tag = reader.take(tag_len).decode("ascii", errors="replace")
        raw_layers.append((tag, [reader.tensor() for _ in range(5)]))
    classifier = reader.tensor()
    if reader.offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - reader.offset} unexpected trailing bytes")

    try:
        layers = [Layer(w, s, b, tag) for tag, (w, s, b, _, _) in raw_layers]
        params = ModelParams(layers, classifier)
        norm = NormState([t[3] for _, t in raw_layers], [t[4] for _, t in raw_layers], momentum, eps)
    except (ValueError, FloatingPointError) as e:
        raise CheckpointError(f"{path}: inconsistent checkpoint contents: {e}") from e
    if params.dims != (input_dim, feature_dim, classes):
        raise CheckpointError(f"{path}: header dims {(input_dim, feature_dim, classes)} != tensor dims {params.dims}")
    return params, norm
