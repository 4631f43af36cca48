"""Dense float64 linear algebra with a small reverse-mode tape.

Every operation accepts plain numpy arrays (pure evaluation, returns an array) or
Nodes recorded on a Tape (differentiable evaluation, returns a Node). Mixing is
allowed: arrays passed next to Nodes are treated as constants.

Matrices are 2-D float64 numpy arrays in C (row-major) order. Random streams come
from numpy's PCG64 generator; the same seed gives the same stream on every platform
for a given numpy major version.
"""
import numpy as np

DEGENERATE_NORM = 1e-12
FD_STEP = 1e-5
BATCH_STANDARDIZE_EPS = 1e-5
RNG_ALGORITHM = "PCG64"
# Floor for the denominator of relative_error
RELATIVE_ERROR_FLOOR = 1e-8


class ShapeError(ValueError):
    """Operand shapes do not fit the operation."""

    def __init__(self, message, shapes=()):
        super().__init__(message)
        self.shapes = tuple(shapes)


class DegenerateVectorError(ValueError):
    """A vector (or some rows of a matrix) has Euclidean norm below DEGENERATE_NORM."""

    def __init__(self, message, rows=()):
        super().__init__(message)
        self.rows = [int(r) for r in rows]


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


def make_rng(seed, stream=0):
    """Seeded PCG64 generator; identical (seed, stream) gives an identical stream.
    `stream` selects an independent substream so one seed can drive several draws."""
    sequence = np.random.SeedSequence(int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.PCG64(sequence))


def as_matrix(data, rows=None, cols=None):
    """Build a float64 matrix from nested sequences or a flat row-major sequence.
    Args:
        data: array-like
        rows, cols: optional shape for flat data
    Returns: 2-D float64 array
    """
    arr = np.array(data, dtype=np.float64)
    if rows is not None and cols is not None:
        if arr.size != rows * cols:
            raise ShapeError(
                f"matrix data has {arr.size} entries, expected {rows}x{cols}={rows * cols}",
                (arr.shape, (rows, cols)),
            )
        arr = arr.reshape(rows, cols)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {arr.shape}", (arr.shape,))
    return _checked(arr, "as_matrix")


def _checked(value, op):
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return value


class Node:
    """One value recorded on a tape."""

    __slots__ = ("tape", "index", "value", "parents", "vjp", "name")

    def __init__(self, tape, index, value, parents=(), vjp=None, name=None):
        self.tape = tape
        self.index = index
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_param(self):
        return self.name is not None

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node #{self.index}{label} shape={self.value.shape}>"


class Tape:
    """Ordered record of primitive operations for one forward/backward pass.
    Nodes are appended in evaluation order, so every node's inputs precede it.
    A tape belongs to one pass; do not share it between threads."""

    def __init__(self):
        self.nodes = []
        self._params = {}

    def __len__(self):
        return len(self.nodes)

    @property
    def params(self):
        return dict(self._params)

    def param(self, value, name):
        """Register a differentiable leaf under a unique name."""
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered on this tape")
        node = self._append(_checked(np.array(value, dtype=np.float64), f"param {name}"), (), None, name)
        self._params[name] = node
        return node

    def constant(self, value):
        return self._append(_checked(value, "constant"), (), None, None)

    def record(self, value, parents, vjp):
        return self._append(value, parents, vjp, None)

    def _append(self, value, parents, vjp, name):
        node = Node(self, len(self.nodes), value, parents, vjp, name)
        self.nodes.append(node)
        return node


def _value(x):
    if isinstance(x, Node):
        return x.value
    return np.asarray(x, dtype=np.float64)


def as_array(x):
    """The numeric value of a Node or array (detached)."""
    return _value(x)


def _tape_of(args):
    tape = None
    for a in args:
        if isinstance(a, Node):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("operands belong to different tapes")
    return tape


def _emit(op, value, args, vjp):
    value = _checked(value, op)
    tape = _tape_of(args)
    if tape is None:
        return value
    parents = tuple(a if isinstance(a, Node) else None for a in args)
    return tape.record(value, parents, vjp)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(op, av, bv):
    try:
        np.broadcast_shapes(av.shape, bv.shape)
    except ValueError as e:
        raise ShapeError(f"{op} shape mismatch: {av.shape} vs {bv.shape}", (av.shape, bv.shape)) from e


# --- primitives ---

def matmul(a, b):
    av, bv = _value(a), _value(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {av.shape} x {bv.shape}", (av.shape, bv.shape))
    return _emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a):
    av = _value(a)
    return _emit("transpose", av.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape):
    av = _value(a)
    return _emit("reshape", av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def add(a, b):
    av, bv = _value(a), _value(b)
    _broadcast_check("add", av, bv)
    return _emit(
        "add", av + bv, (a, b),
        lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)),
    )


def sub(a, b):
    av, bv = _value(a), _value(b)
    _broadcast_check("sub", av, bv)
    return _emit(
        "sub", av - bv, (a, b),
        lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)),
    )


def mul(a, b):
    av, bv = _value(a), _value(b)
    _broadcast_check("mul", av, bv)
    return _emit(
        "mul", av * bv, (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def relu(a):
    av = _value(a)
    return _emit("relu", np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0.0),))


def tanh(a):
    t = np.tanh(_value(a))
    return _emit("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a):
    with np.errstate(over="ignore"):
        e = np.exp(_value(a))
    return _emit("exp", e, (a,), lambda g: (g * e,))


def log(a):
    av = _value(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _emit("log", out, (a,), lambda g: (g / av,))


def sqrt(a):
    """Elementwise square root; the derivative at 0 is taken as 0."""
    with np.errstate(invalid="ignore"):
        s = np.sqrt(_value(a))

    def vjp(g):
        safe = np.where(s > 0.0, s, 1.0)
        return (np.where(s > 0.0, 0.5 * g / safe, 0.0),)

    return _emit("sqrt", s, (a,), vjp)


def sum(a, axis=None, keepdims=False):
    av = _value(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.array(np.broadcast_to(g, av.shape)),)

    return _emit("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    av = _value(a)
    count = av.size if axis is None else av.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def max(a, axis=-1):
    """Maximum along an axis; ties resolve to the lowest index (gradient goes there)."""
    av = _value(a)
    idx = np.expand_dims(np.argmax(av, axis=axis), axis)
    out = np.take_along_axis(av, idx, axis=axis).squeeze(axis)

    def vjp(g):
        grad = np.zeros_like(av)
        np.put_along_axis(grad, idx, np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _emit("max", out, (a,), vjp)


def index_select(a, index, axis=0):
    av = _value(a)
    index = np.asarray(index, dtype=np.int64)
    out = np.take(av, index, axis=axis)

    def vjp(g):
        grad = np.zeros_like(av)
        np.add.at(np.moveaxis(grad, axis, 0), index, np.moveaxis(g, axis, 0))
        return (grad,)

    return _emit("index_select", out, (a,), vjp)


def l2_normalize(a, axis=-1):
    """Scale vectors (rows for a matrix) to unit Euclidean norm.
    Raises DegenerateVectorError naming the rows whose norm is below DEGENERATE_NORM."""
    av = _value(a)
    norms = np.linalg.norm(av, axis=axis, keepdims=True)
    bad = np.squeeze(norms, axis=axis) < DEGENERATE_NORM
    if np.any(bad):
        rows = np.flatnonzero(np.atleast_1d(bad))
        raise DegenerateVectorError(
            f"cannot normalize: norm below {DEGENERATE_NORM} at rows {rows.tolist()}", rows
        )
    u = av / norms

    def vjp(g):
        return ((g - u * np.sum(g * u, axis=axis, keepdims=True)) / norms,)

    return _emit("l2_normalize", u, (a,), vjp)


def softmax(z, axis=-1):
    zv = _value(z)
    e = np.exp(zv - np.max(zv, axis=axis, keepdims=True))
    p = e / np.sum(e, axis=axis, keepdims=True)
    return _emit(
        "softmax", p, (z,),
        lambda g: (p * (g - np.sum(g * p, axis=axis, keepdims=True)),),
    )


def log_softmax(z, axis=-1):
    zv = _value(z)
    shifted = zv - np.max(zv, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    p = np.exp(out)
    return _emit(
        "log_softmax", out, (z,),
        lambda g: (g - p * np.sum(g, axis=axis, keepdims=True),),
    )


def batch_moments(x):
    """Column means and biased variances of a batch."""
    xv = _value(x)
    mu = xv.mean(axis=0)
    return mu, ((xv - mu) ** 2).mean(axis=0)


def batch_standardize(x, eps=BATCH_STANDARDIZE_EPS):
    """Standardize each column with the batch's own mean and biased variance."""
    xv = _value(x)
    if xv.ndim != 2 or xv.shape[0] < 2:
        raise ShapeError(f"batch_standardize needs a 2-D batch of at least 2 rows, got {xv.shape}", (xv.shape,))
    mu, var = batch_moments(xv)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    n = xv.shape[0]

    def vjp(g):
        return (inv / n * (n * g - g.sum(axis=0) - xhat * (g * xhat).sum(axis=0)),)

    return _emit("batch_standardize", xhat, (x,), vjp)


# --- differentiation ---

def backward(tape, loss):
    """Reverse pass from a scalar loss node.
    Returns: dict of parameter name -> gradient array (zeros for parameters the loss
    does not depend on)."""
    if not isinstance(loss, Node) or loss.tape is not tape:
        raise ValueError("loss must be a node recorded on the given tape")
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}", (loss.value.shape,))
    adjoints = {loss.index: np.ones_like(loss.value)}
    grads = {}
    for node in reversed(tape.nodes[: loss.index + 1]):
        grad = adjoints.pop(node.index, None)
        if node.name is not None:
            grads[node.name] = grad if grad is not None else np.zeros_like(node.value)
            continue
        if grad is None or node.vjp is None:
            continue
        for parent, partial in zip(node.parents, node.vjp(grad)):
            if parent is None:
                continue
            if parent.index in adjoints:
                adjoints[parent.index] = adjoints[parent.index] + partial
            else:
                adjoints[parent.index] = partial
    for name, node in tape.params.items():
        grads.setdefault(name, np.zeros_like(node.value))
    return grads


def evaluate_with_grad(build, params):
    """Run build(tape, nodes) -> scalar loss node and differentiate it.
    Args:
        build: callable receiving the tape and a dict of parameter nodes
        params: dict of name -> array
    Returns: (loss value as float, dict of gradients)
    """
    tape = Tape()
    nodes = {name: tape.param(value, name) for name, value in params.items()}
    loss = build(tape, nodes)
    return float(loss.value), backward(tape, loss)


def finite_diff_grad(f, params, step=FD_STEP):
    """Central-difference gradient estimate, one coordinate at a time.
    Args:
        f: scalar function of the parameters (a dict of arrays, or a single array)
        params: dict of name -> array, or a single array
        step: perturbation size
    Returns: gradients with the same structure as params
    """
    if not isinstance(params, dict):
        return finite_diff_grad(lambda p: f(p["p"]), {"p": params}, step)["p"]
    grads = {}
    for name, value in params.items():
        base = np.array(value, dtype=np.float64)
        grad = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus = base.copy()
            plus[idx] += step
            minus = base.copy()
            minus[idx] -= step
            f_plus = float(f({**params, name: plus}))
            f_minus = float(f({**params, name: minus}))
            grad[idx] = (f_plus - f_minus) / (2.0 * step)
        grads[name] = grad
    return grads


def relative_error(a, b):
    """‖a − b‖ / max(‖a‖, ‖b‖, RELATIVE_ERROR_FLOOR)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.linalg.norm(a), np.linalg.norm(b)), RELATIVE_ERROR_FLOOR)
    return float(np.linalg.norm(a - b) / denom)
