"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the handful of operations needed by the attention forecaster are
provided. Every op returns a new :class:`Tensor` that remembers its parents
and a closure propagating the output gradient back to them; :func:`backward`
walks that graph in reverse topological order.

Also here: a central-difference gradient checker, the Adam update, seeded
counter-based RNG streams and the little-endian tensor container used by all
model and table files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "softmax",
    "softmax_rows",
    "layer_norm",
    "reshape",
    "transpose",
    "take_last",
    "mean",
    "sum_all",
    "square",
    "absolute",
    "dropout",
    "topo_order",
    "backward",
    "zero_grad",
    "grad_check",
    "AdamState",
    "adam_step",
    "make_rng",
    "write_container",
    "read_container",
    "tensor_to_bytes",
    "tensor_from_bytes",
]

DTYPE = np.float64


class Tensor:
    """An n-d float64 array plus the bookkeeping needed for backprop.

    ``data`` is never mutated in place by library code. ``grad`` is filled by
    :func:`backward` and has the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, *, op="leaf", parents=(), backward_fn=None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self._parents = tuple(parents)
        self._backward = backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise ContractError("only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, op, backward_fn):
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=parents, backward_fn=backward_fn)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True).reshape(t.shape)
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product over the last two axes, batched over leading ones.

    A 2-d right operand is shared across every leading batch index of ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    shared_rhs = b.ndim == 2 and a.ndim > 2
    if shared_rhs:
        lead = a.shape[:-1]
        flat_a = a.data.reshape(-1, a.shape[-1])
        out = (flat_a @ b.data).reshape(*lead, b.shape[-1])
    else:
        try:
            out = np.matmul(a.data, b.data)
        except ValueError as exc:
            raise ShapeError(str(exc)) from None

    def _bw(g):
        if shared_rhs:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                _accumulate(a, (g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                _accumulate(b, flat_a.T @ g2)
            return
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _node(out, (a, b), "matmul", _bw)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def _bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(out, (a, b), "add", _bw)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def _bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(out, (a, b), "sub", _bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def _bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), "mul", _bw)


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)
    return _node(a.data * c, (a,), "scale", lambda g: _accumulate(a, g * c))


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: _accumulate(a, g * mask))


def softmax(a, axis=-1):
    """Softmax along ``axis`` with max subtraction; rejects non-finite input."""
    a = _as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax input contains NaN or inf")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        _accumulate(a, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _node(s, (a,), "softmax", _bw)


def softmax_rows(m):
    """Row-wise softmax of a 2-d tensor."""
    m = _as_tensor(m)
    if m.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {m.shape}")
    return softmax(m, axis=-1)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then apply elementwise gain and bias."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def _bw(g):
        if gamma.requires_grad:
            _accumulate(gamma, _unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            _accumulate(beta, _unbroadcast(g, beta.shape))
        if x.requires_grad:
            dxhat = g * gamma.data
            dx = (rstd / d) * (
                d * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
            _accumulate(x, dx)

    return _node(out, (x, gamma, beta), "layer_norm", _bw)


def reshape(a, shape):
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _node(out, (a,), "reshape", lambda g: _accumulate(a, g.reshape(a.shape)))


def transpose(a, axes):
    a = _as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return _node(out, (a,), "transpose", lambda g: _accumulate(a, np.transpose(g, inverse)))


def take_last(a, axis=-2):
    """Select the final index along ``axis`` (drops that axis)."""
    a = _as_tensor(a)
    axis = axis % a.ndim
    idx = [slice(None)] * a.ndim
    idx[axis] = -1
    idx = tuple(idx)
    out = a.data[idx]

    def _bw(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        full[idx] = g
        _accumulate(a, full)

    return _node(out, (a,), "take_last", _bw)


def sum_all(a):
    a = _as_tensor(a)
    shape = a.shape
    return _node(np.array(a.data.sum()), (a,), "sum", lambda g: _accumulate(a, np.broadcast_to(g, shape)))


def mean(a):
    a = _as_tensor(a)
    n = a.data.size
    shape = a.shape
    return _node(
        np.array(a.data.mean()), (a,), "mean", lambda g: _accumulate(a, np.broadcast_to(g / n, shape))
    )


def square(a):
    a = _as_tensor(a)
    return _node(a.data * a.data, (a,), "square", lambda g: _accumulate(a, 2.0 * a.data * g))


def absolute(a):
    a = _as_tensor(a)
    sign = np.sign(a.data)
    return _node(np.abs(a.data), (a,), "abs", lambda g: _accumulate(a, g * sign))


def dropout(a, rate, rng):
    """Inverted dropout. ``rate == 0`` is the identity and consumes no randomness."""
    a = _as_tensor(a)
    if rate <= 0.0:
        return a
    if rate >= 1.0:
        raise ContractError("dropout rate must be < 1")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _node(a.data * keep, (a,), "dropout", lambda g: _accumulate(a, g * keep))


# --------------------------------------------------------------------------
# graph traversal
# --------------------------------------------------------------------------


def topo_order(root):
    """Nodes reachable from ``root``; every parent precedes its consumers."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def zero_grad(tensors: Iterable[Tensor]):
    for t in tensors:
        t.grad = None


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Gradients of interior nodes are recomputed from scratch on every call;
    leaf gradients accumulate, so call :func:`zero_grad` between steps.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("loss must be a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topo_order(loss)
    for node in order:
        if node._parents:
            node.grad = None
    loss.grad = np.ones(loss.shape, dtype=DTYPE)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad_check(f: Callable[[Tensor], Tensor], x, eps=1e-6):
    """Max relative error between backprop and central differences.

    Error per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    if not eps > 0:
        raise ContractError("eps must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    leaf = Tensor(x0, requires_grad=True)
    out = f(leaf)
    backward(out)
    analytic = np.zeros_like(x0) if leaf.grad is None else leaf.grad
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(Tensor(x0)).item()
        flat[i] = orig - eps
        fm = f(Tensor(x0)).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * eps)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ContractError("betas must lie in [0, 1)")
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    m_prev = state.m or [np.zeros_like(p) for p in params]
    v_prev = state.v or [np.zeros_like(p) for p in params]
    t = state.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, m_prev, v_prev):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch in adam_step: {p.shape} vs {g.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(step=t, m=new_m, v=new_v)


# --------------------------------------------------------------------------
# RNG
# --------------------------------------------------------------------------


def make_rng(seed, *stream):
    """Philox generator for ``seed`` and an integer sub-stream path.

    Distinct stream paths give statistically independent generators; the same
    (seed, path) reproduces the same draws on every platform.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

_LEN = struct.Struct("<Q")


def tensor_to_bytes(arr):
    """``u64 header length | JSON {shape, dtype} | f64 little-endian row-major``."""
    arr = np.asarray(arr, dtype="<f8")
    header = json.dumps({"shape": list(arr.shape), "dtype": "f64"}, sort_keys=True).encode()
    return _LEN.pack(len(header)) + header + arr.tobytes(order="C")


def tensor_from_bytes(buf):
    (n,) = _LEN.unpack_from(buf, 0)
    header = json.loads(buf[_LEN.size:_LEN.size + n])
    if header.get("dtype") != "f64":
        raise ContractError(f"unsupported dtype {header.get('dtype')!r}")
    shape = tuple(header["shape"])
    count = int(np.prod(shape)) if shape else 1
    start = _LEN.size + n
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=start)
    return data.reshape(shape).astype(DTYPE), start + 8 * count


def write_container(path, manifest: dict, tensors: dict):
    """Write a JSON manifest followed by named f64 tensor blobs.

    The manifest gains a ``tensors`` index (name -> shape, byte offset) so a
    reader can locate each blob. Output bytes depend only on the inputs.
    """
    blobs, index, offset = [], {}, 0
    for name in sorted(tensors):
        blob = tensor_to_bytes(tensors[name])
        index[name] = {"shape": list(np.shape(tensors[name])), "offset": offset, "dtype": "f64"}
        blobs.append(blob)
        offset += len(blob)
    doc = dict(manifest)
    doc["tensors"] = index
    header = json.dumps(doc, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_LEN.pack(len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_container(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    (n,) = _LEN.unpack_from(buf, 0)
    manifest = json.loads(buf[_LEN.size:_LEN.size + n])
    base = _LEN.size + n
    tensors = {}
    for name, entry in manifest.get("tensors", {}).items():
        arr, _ = tensor_from_bytes(buf[base + entry["offset"]:])
        tensors[name] = arr
    return manifest, tensors
