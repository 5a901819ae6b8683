"""Dense float64 tensors with reverse-mode automatic differentiation.

Values live in numpy arrays; every primitive checks its output for
NaN/Inf and, while a tape is active, records a backward closure.
Broadcasting is limited to scalar-with-tensor and row-wise bias.
"""

import itertools

import numpy as np

_ids = itertools.count(1)

_active_tape = None


class ShapeError(ValueError):
    pass


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite values produced by '{op}'")


class Tensor:
    """A float64 array plus grad-tracking metadata.

    node_id identifies the tensor on whatever tape records it; it is
    assigned once at construction and stays stable across training steps,
    so optimizer state can key on it.
    """

    __slots__ = ("values", "requires_grad", "node_id")

    def __init__(self, values, requires_grad=False):
        arr = np.asarray(values, dtype=np.float64)
        _check_finite(arr, "tensor")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self):
        return float(self.values)

    def copy_values(self):
        return self.values.copy()

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x):
    """A non-differentiable tensor."""
    return Tensor(x, requires_grad=False)


class TapeNode:
    __slots__ = ("op", "input_ids", "output_id", "backward_fn")

    def __init__(self, op, input_ids, output_id, backward_fn):
        self.op = op
        self.input_ids = input_ids
        self.output_id = output_id
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive applications.

    Recording order is execution order, so every node's inputs precede
    it and a single reverse sweep is a valid backward pass.
    """

    def __init__(self):
        self.nodes = []
        self._live = set()   # ids of tensors that depend on a grad leaf
        self._leaves = set() # ids of requires_grad tensors seen as inputs
        self._outputs = set()

    def __enter__(self):
        global _active_tape
        if _active_tape is not None:
            raise RuntimeError("a tape is already active")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False

    def _record(self, op, inputs, output, backward_fn):
        tracked = False
        for t in inputs:
            if t.requires_grad:
                self._leaves.add(t.node_id)
                self._live.add(t.node_id)
                tracked = True
            elif t.node_id in self._live:
                tracked = True
        if not tracked:
            return
        self._live.add(output.node_id)
        self._outputs.add(output.node_id)
        self.nodes.append(
            TapeNode(op, [t.node_id for t in inputs], output.node_id, backward_fn)
        )


def active_tape():
    return _active_tape


def _emit(op, inputs, out_values, backward_fn):
    _check_finite(out_values, op)
    out = Tensor(out_values)
    if _active_tape is not None:
        _active_tape._record(op, inputs, out, backward_fn)
    return out


def backward(tape, loss):
    """Reverse sweep over the tape; returns node_id -> Tensor gradients
    for every requires_grad leaf that participated in the loss."""
    if loss.values.shape != ():
        raise ShapeError(f"loss must be scalar, got shape {loss.values.shape}")
    if loss.node_id not in tape._outputs and loss.node_id not in tape._leaves:
        raise ValueError("loss is not on this tape")
    grads = {loss.node_id: np.ones((), dtype=np.float64)}
    for node in reversed(tape.nodes):
        g = grads.get(node.output_id)
        if g is None:
            continue
        for input_id, ig in zip(node.input_ids, node.backward_fn(g)):
            if ig is None:
                continue
            if input_id in grads:
                grads[input_id] = grads[input_id] + ig
            else:
                grads[input_id] = ig
    return {nid: Tensor(grads[nid]) for nid in tape._leaves if nid in grads}


# ---------------------------------------------------------------------------
# primitives

def matmul(a, b):
    av, bv = a.values, b.values
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise ShapeError(f"matmul expects 1-D/2-D operands, got {av.shape} @ {bv.shape}")
    a2 = av[None, :] if av.ndim == 1 else av
    b2 = bv[:, None] if bv.ndim == 1 else bv
    if a2.shape[1] != b2.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {av.shape} @ {bv.shape}")
    out = a2 @ b2
    if av.ndim == 1:
        out = out[0]
    if bv.ndim == 1:
        out = out[..., 0]

    def back(g):
        g2 = np.atleast_2d(g)
        if av.ndim == 1 and bv.ndim == 1:  # scalar result
            g2 = g.reshape(1, 1)
        elif bv.ndim == 1:
            g2 = g.reshape(-1, 1)
        elif av.ndim == 1:
            g2 = g.reshape(1, -1)
        ga = g2 @ b2.T
        gb = a2.T @ g2
        if av.ndim == 1:
            ga = ga[0]
        if bv.ndim == 1:
            gb = gb[:, 0]
        return ga, gb

    return _emit("matmul", (a, b), out, back)


def _add_like(a, b, op):
    av, bv = a.values, b.values
    if av.shape == bv.shape or av.shape == () or bv.shape == ():
        pass
    elif av.ndim == 2 and bv.ndim == 1 and av.shape[1] == bv.shape[0]:
        pass  # row-wise bias
    else:
        raise ShapeError(f"{op} shapes incompatible: {av.shape} vs {bv.shape}")


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    if shape == ():
        return np.sum(g)
    # row-wise bias: sum over leading axis
    return np.sum(g, axis=0)


def add(a, b):
    _add_like(a, b, "add")
    out = a.values + b.values

    def back(g):
        return _reduce_to(g, a.values.shape), _reduce_to(g, b.values.shape)

    return _emit("add", (a, b), out, back)


def sub(a, b):
    _add_like(a, b, "sub")
    out = a.values - b.values

    def back(g):
        return _reduce_to(g, a.values.shape), _reduce_to(-g, b.values.shape)

    return _emit("sub", (a, b), out, back)


def mul(a, b):
    av, bv = a.values, b.values
    if not (av.shape == bv.shape or av.shape == () or bv.shape == ()):
        raise ShapeError(f"mul shapes incompatible: {av.shape} vs {bv.shape}")
    out = av * bv

    def back(g):
        return _reduce_to(g * bv, av.shape), _reduce_to(g * av, bv.shape)

    return _emit("mul", (a, b), out, back)


def div(a, b):
    av, bv = a.values, b.values
    if not (av.shape == bv.shape or av.shape == () or bv.shape == ()):
        raise ShapeError(f"div shapes incompatible: {av.shape} vs {bv.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv

    def back(g):
        return _reduce_to(g / bv, av.shape), _reduce_to(-g * av / (bv * bv), bv.shape)

    return _emit("div", (a, b), out, back)


def neg(a):
    return _emit("neg", (a,), -a.values, lambda g: (-g,))


def concat(*tensors):
    if not tensors:
        raise ShapeError("concat needs at least one input")
    ndim = tensors[0].values.ndim
    if any(t.values.ndim != ndim for t in tensors):
        raise ShapeError("concat inputs must have equal rank")
    out = np.concatenate([t.values for t in tensors], axis=0)
    sizes = [t.values.shape[0] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return _emit("concat", tensors, out, back)


def slice_(a, start, stop):
    """Contiguous slice along the leading axis."""
    n = a.values.shape[0]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice [{start}:{stop}] out of range for leading dim {n}")
    out = a.values[start:stop].copy()

    def back(g):
        full = np.zeros_like(a.values)
        full[start:stop] = g
        return (full,)

    return _emit("slice", (a,), out, back)


def reshape(a, shape):
    out = a.values.reshape(shape)

    def back(g):
        return (g.reshape(a.values.shape),)

    return _emit("reshape", (a,), out, back)


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.values))

    def back(g):
        return (g * out * (1.0 - out),)

    return _emit("sigmoid", (a,), out, back)


def tanh(a):
    out = np.tanh(a.values)

    def back(g):
        return (g * (1.0 - out * out),)

    return _emit("tanh", (a,), out, back)


def relu(a):
    out = np.maximum(a.values, 0.0)

    def back(g):
        return (g * (a.values > 0.0),)

    return _emit("relu", (a,), out, back)


def exp(a):
    out = np.exp(a.values)

    def back(g):
        return (g * out,)

    return _emit("exp", (a,), out, back)


def log(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.values)

    def back(g):
        return (g / a.values,)

    return _emit("log", (a,), out, back)


def square(a):
    out = a.values * a.values

    def back(g):
        return (g * 2.0 * a.values,)

    return _emit("square", (a,), out, back)


def sqrt(a):
    out = np.sqrt(a.values)

    def back(g):
        # denominator clamped: removes the d=0 singularity without
        # touching forward exactness
        return (g / (2.0 * np.maximum(out, 1e-12)),)

    return _emit("sqrt", (a,), out, back)


def sum_(a, axis=None):
    out = np.sum(a.values, axis=axis)

    def back(g):
        if axis is None:
            return (np.full_like(a.values, 1.0) * g,)
        return (np.expand_dims(g, axis) * np.ones_like(a.values),)

    return _emit("sum", (a,), out, back)


def mean(a):
    n = a.values.size
    out = np.sum(a.values) / n

    def back(g):
        return (np.full_like(a.values, g / n),)

    return _emit("mean", (a,), out, back)


def clip(a, lo, hi):
    out = np.clip(a.values, lo, hi)

    def back(g):
        return (g * ((a.values > lo) & (a.values < hi)),)

    return _emit("clip", (a,), out, back)


PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "concat": concat,
    "slice": slice_,
    "reshape": reshape,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "max0": relu,
    "exp": exp,
    "log": log,
    "sum": sum_,
    "mean": mean,
    "square": square,
    "sqrt": sqrt,
    "clip": clip,
}


def primitive(kind, *inputs, **kwargs):
    """Apply a primitive by kind name."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind '{kind}'") from None
    return fn(*inputs, **kwargs)
