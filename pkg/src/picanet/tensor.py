"""Dense tensors and a tape-based reverse-mode differentiation engine.

Feature maps are always laid out as (batch, height, width, channels).
Parameters may carry other ranks (a conv kernel is (kh, kw, cin, cout),
a bias is (cout,)); serialization pads them to rank 4.
"""

import itertools
import struct
from contextlib import contextmanager

import numpy as np

_ids = itertools.count()
_graph_stack = []
_default_dtype = np.float64

DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
# extended precision is accepted for computation (reference finite differences)
# but has no serialized form
COMPUTE_DTYPES = set(DTYPE_CODES) | {np.dtype(np.longdouble)}
MAGIC = b"PTNS"


class GraphError(RuntimeError):
    """Raised when a recorded graph is not a valid single-assignment DAG."""


def set_default_dtype(dtype):
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in COMPUTE_DTYPES:
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return np.dtype(_default_dtype)


@contextmanager
def default_dtype(dtype):
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "id", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.array(data, dtype=dtype or _default_dtype)
        if arr.dtype not in COMPUTE_DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.name = name

    @classmethod
    def _wrap(cls, arr, requires_grad):
        # op outputs skip the finiteness scan; NaN is caught at the loss
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.id = next(_ids)
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, id={self.id})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape, requires_grad=False, dtype=None):
    return Tensor(np.zeros(shape), requires_grad, dtype=dtype or _default_dtype)


class _Op:
    __slots__ = ("name", "inputs", "output", "backward")

    def __init__(self, name, inputs, output, backward):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Graph:
    """Tape of recorded operations.

    Use as a context manager; every differentiable op executed inside the
    block whose inputs require grad is appended in execution order.
    """

    def __init__(self):
        self.ops = []
        self._producer = {}

    def __enter__(self):
        _graph_stack.append(self)
        return self

    def __exit__(self, *exc):
        _graph_stack.remove(self)
        return False

    def record(self, name, inputs, output, backward):
        if output.id in self._producer:
            raise GraphError(f"node {output.id} assigned twice")
        self._producer[output.id] = len(self.ops)
        self.ops.append(_Op(name, tuple(inputs), output, backward))

    def op_names(self):
        return [op.name for op in self.ops]

    def leaves(self):
        seen = {}
        for op in self.ops:
            for t in op.inputs:
                if t.id not in self._producer and t.requires_grad:
                    seen.setdefault(t.id, t)
        return list(seen.values())

    def validate(self):
        for pos, op in enumerate(self.ops):
            for t in op.inputs:
                src = self._producer.get(t.id)
                if src is not None and src >= pos:
                    raise GraphError(f"op {op.name} at {pos} consumes node {t.id} produced later")


def active_graph():
    return _graph_stack[-1] if _graph_stack else None


def record(name, inputs, out_data, backward):
    """Wrap ``out_data`` as a Tensor and tape it if any input needs grad."""
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, needs)
    g = active_graph()
    if needs and g is not None:
        g.record(name, inputs, out, backward)
    return out


@contextmanager
def no_grad():
    """Run ops without taping (inference)."""
    saved = list(_graph_stack)
    _graph_stack.clear()
    try:
        yield
    finally:
        _graph_stack.extend(saved)


def backward(graph, loss, wrt=None):
    """Reverse-mode sweep over ``graph`` from the scalar ``loss``.

    Returns a dict mapping tensor id to gradient for every leaf of the graph
    (and every tensor in ``wrt``). Leaves the loss does not depend on get
    zeros. Leaf ``.grad`` attributes are set as a side effect.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    graph.validate()
    leaves = {t.id: t for t in graph.leaves()}
    for t in wrt or ():
        leaves.setdefault(t.id, t)

    grads = {loss.id: np.ones_like(loss.data)}
    end = graph._producer.get(loss.id)
    ops = graph.ops[: end + 1] if end is not None else []
    for op in reversed(ops):
        g_out = grads.get(op.output.id)
        if g_out is None:
            continue
        in_grads = op.backward(g_out)
        for t, g in zip(op.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            if t.id in grads:
                grads[t.id] = grads[t.id] + g
            else:
                grads[t.id] = g

    result = {}
    for tid, t in leaves.items():
        g = grads.get(tid)
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g
        result[tid] = g
    return result


def fd_check(op, inputs, eps=1e-3, projection="random", seed=0, order=4, sample=None,
             ref_dtype=None):
    """Largest relative error between analytic and finite-difference grads.

    ``op`` maps the list of input Tensors to one Tensor. Non-scalar outputs
    are reduced to a scalar with a fixed standard-normal projection
    (``projection="random"``) or a plain sum (``"sum"``). A plain sum, or
    any positive-mean projection, makes the gradients of normalizing ops
    vanish or nearly vanish, which hides errors under roundoff. Perturbed
    outputs are differenced elementwise before reduction so that untouched
    outputs cancel exactly. ``order=4`` uses the 5-point stencil, ``order=2``
    plain central differences.

    ``sample`` limits the check to that many randomly chosen entries per
    input. ``ref_dtype`` (e.g. ``np.longdouble``) evaluates the difference
    quotients on higher-precision copies of the inputs, for outputs whose
    gradients sit near the 64-bit rounding floor. Callers must keep inputs
    at least ``2 * eps`` away from kinks.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    inputs = [Tensor(np.array(t.data), requires_grad=True, dtype=t.dtype) for t in inputs]
    with Graph() as g:
        out = op(inputs)
        if out.data.size == 1 or projection == "sum":
            w = np.ones(out.shape, dtype=out.dtype)
        else:
            w = np.random.default_rng(seed).standard_normal(out.shape).astype(out.dtype)
        loss = sum_all(mul(out, Tensor(w, dtype=out.dtype)))
    grads = backward(g, loss, wrt=inputs)

    probe = inputs
    if ref_dtype is not None:
        probe = [Tensor(t.data, dtype=ref_dtype) for t in inputs]

    def at(flat, k, value):
        flat[k] = value
        with no_grad():
            return op(probe).data.astype(ref_dtype or np.float64)

    pick = np.random.default_rng(seed + 1)
    worst = 0.0
    for t, p in zip(inputs, probe):
        flat = p.data.reshape(-1)
        a_flat = grads[t.id].reshape(-1)
        entries = range(flat.size)
        if sample is not None and flat.size > sample:
            entries = pick.choice(flat.size, sample, replace=False)
        for k in entries:
            orig = flat[k]
            d1 = at(flat, k, orig + eps) - at(flat, k, orig - eps)
            if order == 2:
                cd = float(np.sum(d1 * w) / (2 * eps))
            else:
                d2 = at(flat, k, orig + 2 * eps) - at(flat, k, orig - 2 * eps)
                cd = float(np.sum((8 * d1 - d2) * w) / (12 * eps))
            flat[k] = orig
            a = float(a_flat[k])
            err = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- primitives

OPS = {}


def register(fn):
    OPS[fn.__name__] = fn
    return fn


def _check_same(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")


@register
def add(a, b):
    _check_same(a, b)
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


@register
def sub(a, b):
    _check_same(a, b)
    return record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


@register
def mul(a, b):
    _check_same(a, b)
    return record("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


@register
def scale(a, c):
    return record("scale", (a,), a.data * c, lambda g: (g * c,))


@register
def add_bias(x, b):
    """x (..., C) plus a per-channel bias (C,)."""
    if b.shape != x.shape[-1:]:
        raise ValueError(f"bias {b.shape} does not match channels {x.shape[-1]}")
    axes = tuple(range(x.data.ndim - 1))
    return record("add_bias", (x, b), x.data + b.data, lambda g: (g, g.sum(axis=axes)))


@register
def sum_all(x):
    shape = x.shape
    return record("sum_all", (x,), np.sum(x.data).reshape(1, 1, 1, 1),
                  lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))


@register
def mean_all(x):
    shape, n = x.shape, x.data.size
    return record("mean_all", (x,), np.mean(x.data).reshape(1, 1, 1, 1),
                  lambda g: (np.full(shape, g.reshape(()) / n, dtype=x.dtype),))


@register
def reshape(x, shape):
    old = x.shape
    return record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


@register
def concat(xs, axis=-1):
    xs = tuple(xs)
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bwd(g):
        return tuple(np.split(g, sizes, axis=axis))

    return record("concat", xs, np.concatenate([t.data for t in xs], axis=axis), bwd)


@register
def relu(x):
    mask = x.data > 0
    return record("relu", (x,), np.where(mask, x.data, 0), lambda g: (g * mask,))


def _sigmoid(z):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@register
def sigmoid(x):
    s = _sigmoid(x.data)
    return record("sigmoid", (x,), s, lambda g: (g * s * (1 - s),))


@register
def tanh(x):
    t = np.tanh(x.data)
    return record("tanh", (x,), t, lambda g: (g * (1 - t * t),))


@register
def log(x):
    return record("log", (x,), np.log(x.data), lambda g: (g / x.data,))


@register
def clamp(x, lo, hi):
    inside = (x.data >= lo) & (x.data <= hi)
    return record("clamp", (x,), np.clip(x.data, lo, hi), lambda g: (g * inside,))


@register
def matmul(a, b):
    """(..., m, k) @ (k, n)."""
    if b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul needs (..., m, k) @ (k, n), got {a.shape} @ {b.shape}")

    def bwd(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return record("matmul", (a, b), a.data @ b.data, bwd)


@register
def transpose(x, axes):
    inv = tuple(np.argsort(axes))
    return record("transpose", (x,), np.ascontiguousarray(x.data.transpose(axes)),
                  lambda g: (g.transpose(inv),))


@register
def flip(x, axis):
    return record("flip", (x,), np.flip(x.data, axis).copy(), lambda g: (np.flip(g, axis).copy(),))


# ------------------------------------------------------------- serialization

def tensor_to_bytes(t):
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.ndim > 4:
        raise ValueError("rank > 4 cannot be serialized")
    if arr.dtype not in DTYPE_CODES:
        raise ValueError(f"dtype {arr.dtype} cannot be serialized")
    dims = (1,) * (4 - arr.ndim) + arr.shape
    code = DTYPE_CODES[arr.dtype]
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    return MAGIC + struct.pack("<B4I", code, *dims) + np.ascontiguousarray(le).tobytes()


def tensor_from_bytes(buf, offset=0):
    """Decode one serialized tensor; returns (array, bytes consumed)."""
    if buf[offset:offset + 4] != MAGIC:
        raise ValueError("bad tensor magic")
    code, *dims = struct.unpack_from("<B4I", buf, offset + 4)
    dtype = {v: k for k, v in DTYPE_CODES.items()}[code].newbyteorder("<")
    count = int(np.prod(dims))
    start = offset + 4 + 17
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=start).reshape(dims)
    return arr.astype(arr.dtype.newbyteorder("="), copy=True), 21 + count * dtype.itemsize
