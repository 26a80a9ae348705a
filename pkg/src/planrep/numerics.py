"""Dense-tensor computation core with reverse-mode automatic differentiation.

The primitive set is intentionally small: exactly what the feature
projection, the graph-attention convolutions, the recurrent cells, and the
MLP head need.  Every primitive application can be recorded on an active
``Tape``; ``backward`` walks the tape in reverse to produce gradients for
watched parameters, and ``Tape.replay`` re-executes the forward pass from
the recorded leaves for bit-level verification.

Conventions kept throughout the package:

* default precision is float64 (float32 is an opt-in inference mode);
* no implicit broadcasting except scalar-times-tensor in ``multiply``;
* reductions and matmuls run single-pass row-major, so repeated runs on
  the same machine are bit-reproducible.
"""

from __future__ import annotations

import itertools
import math
import threading
from dataclasses import dataclass

import numpy as np

PRECISIONS = {"64-bit": np.float64, "32-bit": np.float32}


class NumericsError(ValueError):
    """Raised on shape/domain violations in primitive applications."""


_UIDS = itertools.count(1)


class Tensor:
    """Immutable dense array of float32/float64 values in row-major order."""

    __slots__ = ("data", "uid")

    def __init__(self, data, precision="64-bit"):
        dtype = PRECISIONS.get(precision, precision)
        if dtype not in (np.float64, np.float32):
            raise NumericsError(f"unsupported precision {precision!r}")
        arr = np.array(data, dtype=dtype, order="C")
        arr.flags.writeable = False
        self.data = arr
        self.uid = next(_UIDS)

    @classmethod
    def _wrap(cls, arr):
        # Internal fast path: takes ownership of a fresh ndarray.
        t = object.__new__(cls)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.data = arr
        t.uid = next(_UIDS)
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def precision(self):
        return "64-bit" if self.data.dtype == np.float64 else "32-bit"

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, precision={self.precision})"


def const(data, dtype=np.float64):
    """Constant (non-parameter) tensor; participates in the graph as a leaf."""
    return Tensor(data, precision=dtype)


def zeros(shape, dtype=np.float64):
    return Tensor._wrap(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=np.float64):
    return Tensor._wrap(np.ones(shape, dtype=dtype))


# ---------------------------------------------------------------------------
# Tape


_STACK = threading.local()


def _tape_stack():
    stack = getattr(_STACK, "stack", None)
    if stack is None:
        stack = _STACK.stack = []
    return stack


def active_tape():
    """The innermost tape on this thread, or None when recording is off."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive applications.

    Entries are tuples ``(kind, out_uid, input_uids, aux)`` appended in
    execution order, so every input uid precedes its consumer.  ``values``
    maps uids (leaves and results) to their arrays; ``watched`` maps the
    uids of watched leaves to parameter names.
    """

    def __init__(self):
        self.entries = []
        self.values = {}
        self.watched = {}

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self, "tape stack corrupted"
        return False

    def watch(self, target, name=None):
        """Register a leaf whose gradient ``backward`` must report.

        ``target`` is a Parameter or a Tensor (with explicit ``name``).
        """
        if isinstance(target, Parameter):
            tensor, name = target.tensor, target.name
        else:
            tensor = target
            if name is None:
                raise NumericsError("watching a bare tensor requires a name")
        self.values[tensor.uid] = tensor.data
        self.watched[tensor.uid] = name

    def record(self, kind, out, inputs, aux):
        values = self.values
        for t in inputs:
            if t.uid not in values:
                values[t.uid] = t.data
        values[out.uid] = out.data
        self.entries.append((kind, out.uid, tuple(t.uid for t in inputs), aux))

    def replay(self):
        """Re-run the recorded forward pass from leaf values.

        Returns a map uid -> recomputed array covering every recorded
        result; with untouched leaves the recomputation is bitwise equal
        to the original execution.
        """
        produced = {out for (_, out, _, _) in self.entries}
        vals = {uid: v for uid, v in self.values.items() if uid not in produced}
        for kind, out, ins, aux in self.entries:
            vals[out] = _FORWARD[kind]([vals[i] for i in ins], aux)
        return vals


# ---------------------------------------------------------------------------
# Primitives.  Each has a pure forward kernel (used both for execution and
# for tape replay) and a backward rule mapping the output gradient to input
# gradient contributions.


def _shapes(arrays):
    return " and ".join(str(a.shape) for a in arrays)


def _check_same_dtype(kind, arrays):
    dt = arrays[0].dtype
    for a in arrays[1:]:
        if a.dtype != dt:
            raise NumericsError(f"{kind}: mixed precisions {arrays[0].dtype} and {a.dtype}")


def _emit(kind, inputs, aux=None):
    out = Tensor._wrap(_FORWARD[kind]([t.data for t in inputs], aux))
    tape = active_tape()
    if tape is not None:
        tape.record(kind, out, inputs, aux)
    return out


def _fw_add(arrays, aux):
    a, b = arrays
    return a + b


def _bw_add(arrays, out, aux, g):
    return [g, g]


def _fw_subtract(arrays, aux):
    a, b = arrays
    return a - b


def _bw_subtract(arrays, out, aux, g):
    return [g, -g]


def _fw_multiply(arrays, aux):
    a, b = arrays
    return a * b


def _bw_multiply(arrays, out, aux, g):
    a, b = arrays
    ga = g * b
    gb = g * a
    if a.size == 1 and a.shape != g.shape:
        ga = ga.sum().reshape(a.shape)
    if b.size == 1 and b.shape != g.shape:
        gb = gb.sum().reshape(b.shape)
    return [ga, gb]


def _fw_matmul(arrays, aux):
    a, b = arrays
    return a @ b


def _bw_matmul(arrays, out, aux, g):
    a, b = arrays
    return [g @ b.T, a.T @ g]


def _fw_concat(arrays, aux):
    axis, _ = aux
    return np.concatenate(arrays, axis=axis)


def _bw_concat(arrays, out, aux, g):
    axis, extents = aux
    splits = np.cumsum(extents[:-1])
    return list(np.split(g, splits, axis=axis))


def _fw_gather_rows(arrays, aux):
    (x,) = arrays
    return x[aux]


def _bw_gather_rows(arrays, out, aux, g):
    (x,) = arrays
    gx = np.zeros_like(x)
    np.add.at(gx, aux, g)
    return [gx]


def _fw_scatter_add_rows(arrays, aux):
    (x,) = arrays
    idx, num_rows = aux
    out = np.zeros((num_rows, x.shape[1]), dtype=x.dtype)
    np.add.at(out, idx, x)
    return out


def _bw_scatter_add_rows(arrays, out, aux, g):
    idx, _ = aux
    return [g[idx]]


def _segment_relabel(segments):
    _, inverse = np.unique(segments, return_inverse=True)
    return inverse.astype(np.intp), int(inverse.max()) + 1 if len(inverse) else 0


def _fw_segment_softmax(arrays, aux):
    (x,) = arrays
    segments, _ = aux
    if x.size == 0:
        return x.copy()
    x2 = x if x.ndim == 2 else x[:, None]
    inv, nseg = _segment_relabel(segments)
    m = np.full((nseg, x2.shape[1]), -np.inf, dtype=x2.dtype)
    np.maximum.at(m, inv, x2)
    e = np.exp(x2 - m[inv])
    s = np.zeros((nseg, x2.shape[1]), dtype=x2.dtype)
    np.add.at(s, inv, e)
    y = e / s[inv]
    return y if x.ndim == 2 else y[:, 0]


def _bw_segment_softmax(arrays, out, aux, g):
    (x,) = arrays
    segments, _ = aux
    if x.size == 0:
        return [g.copy()]
    y2 = out if out.ndim == 2 else out[:, None]
    g2 = g if g.ndim == 2 else g[:, None]
    inv, nseg = _segment_relabel(segments)
    t = np.zeros((nseg, y2.shape[1]), dtype=y2.dtype)
    np.add.at(t, inv, y2 * g2)
    gx = y2 * (g2 - t[inv])
    return [gx if x.ndim == 2 else gx[:, 0]]


def _fw_row_max(arrays, aux):
    (x,) = arrays
    return x[np.arange(x.shape[0]), aux][:, None]


def _bw_row_max(arrays, out, aux, g):
    (x,) = arrays
    gx = np.zeros_like(x)
    gx[np.arange(x.shape[0]), aux] = g[:, 0]
    return [gx]


def _fw_sum_reduce(arrays, aux):
    (x,) = arrays
    axis = aux
    if axis is None:
        return np.asarray(x.sum(), dtype=x.dtype)
    return x.sum(axis=axis, keepdims=True)


def _bw_sum_reduce(arrays, out, aux, g):
    (x,) = arrays
    return [np.broadcast_to(g, x.shape).copy() if g.shape != x.shape else g]


def _fw_sigmoid(arrays, aux):
    (x,) = arrays
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _bw_sigmoid(arrays, out, aux, g):
    return [g * out * (1.0 - out)]


def _fw_tanh(arrays, aux):
    return np.tanh(arrays[0])


def _bw_tanh(arrays, out, aux, g):
    return [g * (1.0 - out * out)]


def _fw_relu(arrays, aux):
    return np.maximum(arrays[0], 0.0)


def _bw_relu(arrays, out, aux, g):
    return [g * (arrays[0] > 0)]


def _fw_scale(arrays, aux):
    return arrays[0] * aux


def _bw_scale(arrays, out, aux, g):
    return [g * aux]


def _fw_dropout(arrays, aux):
    mask, rate = aux
    return arrays[0] * (mask / (1.0 - rate))


def _bw_dropout(arrays, out, aux, g):
    mask, rate = aux
    return [g * (mask / (1.0 - rate))]


def _fw_reshape(arrays, aux):
    return arrays[0].reshape(aux)


def _bw_reshape(arrays, out, aux, g):
    return [g.reshape(arrays[0].shape)]


_FORWARD = {
    "add": _fw_add,
    "subtract": _fw_subtract,
    "multiply": _fw_multiply,
    "matmul": _fw_matmul,
    "concat": _fw_concat,
    "gather_rows": _fw_gather_rows,
    "scatter_add_rows": _fw_scatter_add_rows,
    "segment_softmax": _fw_segment_softmax,
    "row_max": _fw_row_max,
    "sum_reduce": _fw_sum_reduce,
    "sigmoid": _fw_sigmoid,
    "tanh": _fw_tanh,
    "relu": _fw_relu,
    "scale": _fw_scale,
    "dropout": _fw_dropout,
    "reshape": _fw_reshape,
}

_BACKWARD = {
    "add": _bw_add,
    "subtract": _bw_subtract,
    "multiply": _bw_multiply,
    "matmul": _bw_matmul,
    "concat": _bw_concat,
    "gather_rows": _bw_gather_rows,
    "scatter_add_rows": _bw_scatter_add_rows,
    "segment_softmax": _bw_segment_softmax,
    "row_max": _bw_row_max,
    "sum_reduce": _bw_sum_reduce,
    "sigmoid": _bw_sigmoid,
    "tanh": _bw_tanh,
    "relu": _bw_relu,
    "scale": _bw_scale,
    "dropout": _bw_dropout,
    "reshape": _bw_reshape,
}


# ---------------------------------------------------------------------------
# Public primitive surface


def add(a, b):
    if a.shape != b.shape:
        raise NumericsError(f"add: shapes {_shapes([a.data, b.data])} differ")
    _check_same_dtype("add", [a.data, b.data])
    return _emit("add", (a, b))


def subtract(a, b):
    if a.shape != b.shape:
        raise NumericsError(f"subtract: shapes {_shapes([a.data, b.data])} differ")
    _check_same_dtype("subtract", [a.data, b.data])
    return _emit("subtract", (a, b))


def multiply(a, b):
    """Elementwise product; one operand may be a single-element scalar."""
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise NumericsError(f"multiply: shapes {_shapes([a.data, b.data])} differ")
    _check_same_dtype("multiply", [a.data, b.data])
    return _emit("multiply", (a, b))


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise NumericsError(f"matmul: incompatible shapes {_shapes([a.data, b.data])}")
    _check_same_dtype("matmul", [a.data, b.data])
    return _emit("matmul", (a, b))


def concat(tensors, axis=0):
    tensors = tuple(tensors)
    if not tensors:
        raise NumericsError("concat: no inputs")
    ndim = tensors[0].data.ndim
    if axis >= ndim:
        raise NumericsError(f"concat: axis {axis} out of range for ndim {ndim}")
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        if len(s) != ndim or s[:axis] + s[axis + 1:] != ref[:axis] + ref[axis + 1:]:
            raise NumericsError(f"concat: shapes {_shapes([x.data for x in tensors])} disagree off axis {axis}")
    _check_same_dtype("concat", [t.data for t in tensors])
    extents = tuple(t.shape[axis] for t in tensors)
    return _emit("concat", tensors, (axis, extents))


def gather_rows(x, indices):
    if x.data.ndim != 2:
        raise NumericsError(f"gather_rows: need a matrix, got shape {x.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise NumericsError("gather_rows: indices must be one-dimensional")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise NumericsError(f"gather_rows: index out of range for {x.shape[0]} rows")
    return _emit("gather_rows", (x,), idx)


def scatter_add_rows(values, indices, num_rows):
    if values.data.ndim != 2:
        raise NumericsError(f"scatter_add_rows: need a matrix, got shape {values.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.shape != (values.shape[0],):
        raise NumericsError("scatter_add_rows: one index per value row required")
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise NumericsError(f"scatter_add_rows: index out of range for {num_rows} rows")
    return _emit("scatter_add_rows", (values,), (idx, int(num_rows)))


def segment_softmax(x, segments, num_segments=None):
    """Softmax over groups of entries (axis 0) sharing a segment key."""
    if x.data.ndim not in (1, 2):
        raise NumericsError(f"segment_softmax: need a vector or matrix, got shape {x.shape}")
    seg = np.asarray(segments)
    if not np.issubdtype(seg.dtype, np.integer):
        raise NumericsError("segment_softmax: segment keys must be integers")
    seg = seg.astype(np.intp)
    if seg.shape != (x.shape[0],):
        raise NumericsError(f"segment_softmax: {x.shape[0]} entries but {seg.size} segment keys")
    if seg.size and seg.min() < 0:
        raise NumericsError("segment_softmax: negative segment key")
    if num_segments is not None and seg.size and seg.max() >= num_segments:
        raise NumericsError(
            f"segment_softmax: unknown segment key {int(seg.max())} (have {num_segments} segments)")
    return _emit("segment_softmax", (x,), (seg, num_segments))


def row_max(x):
    """Per-row maximum of a matrix, keepdims; argmax indices go to the tape."""
    if x.data.ndim != 2 or x.shape[1] == 0:
        raise NumericsError(f"row_max: need a non-empty matrix, got shape {x.shape}")
    argmax = np.argmax(x.data, axis=1)
    return _emit("row_max", (x,), argmax)


def row_argmax(x):
    """First-maximum column index per row (plain array, not differentiable)."""
    return np.argmax(x.data, axis=1)


def sum_reduce(x, axis=None):
    """Sum to a scalar (axis=None) or along axis 0/1 with kept dims."""
    if axis is None:
        return _emit("sum_reduce", (x,), None)
    if x.data.ndim != 2 or axis not in (0, 1):
        raise NumericsError(f"sum_reduce: axis {axis} invalid for shape {x.shape}")
    return _emit("sum_reduce", (x,), axis)


def sigmoid(x):
    return _emit("sigmoid", (x,))


def tanh(x):
    return _emit("tanh", (x,))


def relu(x):
    return _emit("relu", (x,))


def scale(x, factor):
    """Multiply by a compile-time scalar constant."""
    return _emit("scale", (x,), float(factor))


def dropout(x, mask, rate):
    """Apply a sampled {0,1} mask with inverted scaling 1/(1-rate)."""
    mask = np.asarray(mask, dtype=x.data.dtype)
    if mask.shape != x.shape:
        raise NumericsError(f"dropout: mask shape {mask.shape} != input shape {x.shape}")
    if not 0.0 <= rate < 1.0:
        raise NumericsError(f"dropout: rate {rate} outside [0, 1)")
    return _emit("dropout", (x,), (mask, float(rate)))


def reshape(x, shape):
    """Row-major view with a new shape (no data movement)."""
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise NumericsError(f"reshape: cannot view {x.shape} as {shape}")
    return _emit("reshape", (x,), shape)


_PRIMITIVES = {
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "matmul": matmul,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "gather_rows": gather_rows,
    "scatter_add_rows": scatter_add_rows,
    "segment_softmax": segment_softmax,
    "row_max": row_max,
    "sum_reduce": sum_reduce,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "scale": scale,
    "dropout": dropout,
    "reshape": reshape,
}


def apply_primitive(kind, *inputs, **attrs):
    """Generic entry point: dispatch a primitive by name."""
    fn = _PRIMITIVES.get(kind)
    if fn is None:
        raise NumericsError(f"unknown primitive {kind!r}")
    return fn(*inputs, **attrs)


def linear(x, weight, bias):
    """x @ W + b with the bias tiled explicitly over rows."""
    out = matmul(x, weight)
    tile = ones((x.shape[0], 1), dtype=x.data.dtype)
    return add(out, matmul(tile, bias))


# ---------------------------------------------------------------------------
# Parameters, backward, gradient checking, Adam


class Parameter:
    """Named trainable tensor plus gradient and Adam moment buffers."""

    __slots__ = ("name", "tensor", "gradient", "adam_m", "adam_v", "step_count")

    def __init__(self, name, tensor):
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor)
        self.name = name
        self.tensor = tensor
        self.gradient = np.zeros_like(tensor.data)
        self.adam_m = np.zeros_like(tensor.data)
        self.adam_v = np.zeros_like(tensor.data)
        self.step_count = 0

    def accumulate(self, grad):
        data = grad.data if isinstance(grad, Tensor) else np.asarray(grad)
        if data.shape != self.gradient.shape:
            raise NumericsError(
                f"gradient shape {data.shape} != parameter shape {self.gradient.shape} for {self.name!r}")
        self.gradient = self.gradient + data

    def zero_grad(self):
        self.gradient = np.zeros_like(self.tensor.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


def backward(tape, root):
    """Gradients of a scalar root w.r.t. every watched leaf on the tape.

    Watched leaves the root does not reach get zero gradients.
    """
    if root.size != 1:
        raise NumericsError(f"backward: root must be scalar, got shape {root.shape}")
    produced = {out for (_, out, _, _) in tape.entries}
    if root.uid not in produced:
        raise NumericsError("backward: root was not produced on this tape")
    grads = {root.uid: np.ones_like(tape.values[root.uid])}
    for kind, out, ins, aux in reversed(tape.entries):
        g = grads.pop(out, None)
        if g is None:
            continue
        arrays = [tape.values[i] for i in ins]
        contribs = _BACKWARD[kind](arrays, tape.values[out], aux, g)
        for uid, c in zip(ins, contribs):
            if c is None:
                continue
            if uid in grads:
                grads[uid] = grads[uid] + c
            else:
                grads[uid] = c
    return {
        name: Tensor._wrap(grads[uid].copy() if uid in grads else np.zeros_like(tape.values[uid]))
        for uid, name in tape.watched.items()
    }


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: int
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def grad_check(forward, params, epsilon=1e-5, tolerance=1e-4, corrupt_sign=False):
    """Compare analytic gradients against central finite differences.

    ``forward`` is a zero-argument closure reading the current parameter
    tensors and returning a scalar Tensor; it must be deterministic and run
    at 64-bit precision.  ``corrupt_sign`` flips the analytic gradients and
    exists purely as a negative control: it must make the check fail.
    """
    plist = list(params.values()) if isinstance(params, dict) else list(params)
    for p in plist:
        if p.tensor.data.dtype != np.float64:
            raise NumericsError(f"grad_check requires 64-bit parameters ({p.name!r} is not)")

    def run():
        out = forward()
        if out.size != 1:
            raise NumericsError("grad_check: forward must return a scalar")
        return out.item()

    if run() != run():
        raise NumericsError("grad_check: non-deterministic forward (two runs differ)")

    with Tape() as tape:
        for p in plist:
            tape.watch(p)
        out = forward()
    analytic = backward(tape, out)

    max_rel = 0.0
    worst_param = ""
    worst_index = -1
    for p in plist:
        base = p.tensor.data
        a = analytic[p.name].data.reshape(-1)
        if corrupt_sign:
            a = -a
        for i in range(base.size):
            bumped = base.copy().reshape(-1)
            bumped[i] += epsilon
            p.tensor = Tensor._wrap(bumped.reshape(base.shape))
            f_plus = run()
            bumped = base.copy().reshape(-1)
            bumped[i] -= epsilon
            p.tensor = Tensor._wrap(bumped.reshape(base.shape))
            f_minus = run()
            p.tensor = Tensor._wrap(base)
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            rel = abs(a[i] - numeric) / max(1e-8, abs(a[i]), abs(numeric))
            if rel > max_rel:
                max_rel, worst_param, worst_index = rel, p.name, i
    return GradCheckReport(max_rel, worst_param, worst_index, tolerance)


def uniform_init(shape, fan_in, rng):
    """Seeded uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) tensor."""
    bound = 1.0 / math.sqrt(fan_in) if fan_in > 0 else 1.0
    return Tensor._wrap(rng.uniform(-bound, bound, size=shape))


def adam_step(params, learning_rate, beta1=0.9, beta2=0.999, epsilon=1e-8):
    """Bias-corrected Adam update over a parameter set; zeroes gradients."""
    plist = list(params.values()) if isinstance(params, dict) else list(params)
    for p in plist:
        g = p.gradient
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for parameter {p.name!r}")
        p.step_count += 1
        t = p.step_count
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * (g * g)
        m_hat = p.adam_m / (1.0 - beta1 ** t)
        v_hat = p.adam_v / (1.0 - beta2 ** t)
        p.tensor = Tensor._wrap(p.tensor.data - learning_rate * m_hat / (np.sqrt(v_hat) + epsilon))
        p.gradient = np.zeros_like(g)
