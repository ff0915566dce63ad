"""Dense tensors with reverse-mode automatic differentiation on a numpy backend.

The graph is taped implicitly: every differentiable op wires a backward
closure into the output tensor, and ``backward()`` replays the closures in
reverse topological order.  float32 is the training precision; float64 is
used by the oracle and finite-difference suites.  All kernels reduce in a
fixed index order, so repeated runs on the same inputs are bit-identical.
"""

from __future__ import annotations

import struct
from typing import Iterable, Sequence

import numpy as np

EPS_NORM = 1e-12  # guard for L2 normalization / cosine denominators

_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class no_grad:
    """Context manager that disables tape construction (pure inference)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """N-dimensional real array, optionally participating in the grad tape."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None  # same-shape ndarray, allocated lazily
        self._backward = None
        self._prev: tuple = ()

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis)

    # -- backward pass --------------------------------------------------------

    def backward(self):
        """Backpropagate from this scalar through the recorded tape."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        self.grad = np.ones_like(self.data)
        for node in reversed(_toposort(self)):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _toposort(root: Tensor) -> list:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._prev:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad += g


def _node(data: np.ndarray, prev: tuple, backward) -> Tensor:
    """Wrap a forward result; wire the tape only when grads are live."""
    rg = _grad_enabled and any(p.requires_grad for p in prev)
    out = Tensor(data)
    if rg:
        out.requires_grad = True
        out._prev = prev
        out._backward = backward
    return out


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradients over dimensions that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    out_data = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, -_unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    out_data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        _accumulate(a, g * s)

    return _node(a.data * s, (a,), backward)


def shift(a: Tensor, c: float) -> Tensor:
    def backward(g):
        _accumulate(a, g)

    return _node(a.data + float(c), (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        _accumulate(a, g * mask)

    return _node(a.data * mask, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - out_data * out_data))

    return _node(out_data, (a,), backward)


def square(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g * (2.0 * a.data))

    return _node(a.data * a.data, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g / a.data)

    return _node(np.log(a.data), (a,), backward)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape) if isinstance(shape, (tuple, list)) else (shape,)

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _node(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, g.transpose(inverse))

    return _node(a.data.transpose(axes), (a,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis: dim 0 for CHW, dim 1 for NCHW."""
    if a.ndim != b.ndim or a.ndim not in (3, 4):
        raise ShapeError(f"concat_channels expects two CHW or NCHW tensors, got {a.shape} and {b.shape}")
    axis = 0 if a.ndim == 3 else 1
    if a.shape[:axis] != b.shape[:axis] or a.shape[axis + 1:] != b.shape[axis + 1:]:
        raise ShapeError(f"concat_channels extent mismatch: {a.shape} vs {b.shape}")
    split = a.shape[axis]
    out_data = np.concatenate([a.data, b.data], axis=axis)

    def backward(g):
        ga, gb = np.split(g, [split], axis=axis)
        _accumulate(a, ga)
        _accumulate(b, gb)

    return _node(out_data, (a, b), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    return _node(a.data.sum(axis=axis), (a,), backward)


def tensor_mean(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]

    def backward(g):
        gexp = g if axis is None else np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(gexp, a.data.shape) / count)

    return _node(a.data.mean(axis=axis), (a,), backward)


def gap(f: Tensor) -> Tensor:
    """Global average pooling: per-channel spatial mean, CHW -> C or NCHW -> NC."""
    if f.ndim == 3:
        axes, denom = (1, 2), f.shape[1] * f.shape[2]
    elif f.ndim == 4:
        axes, denom = (2, 3), f.shape[2] * f.shape[3]
    else:
        raise ShapeError(f"gap expects CHW or NCHW, got {f.shape}")

    def backward(g):
        gexp = np.expand_dims(np.expand_dims(g, -1), -1)
        _accumulate(f, np.broadcast_to(gexp, f.data.shape) / denom)

    return _node(f.data.mean(axis=axes), (f,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D operands or identically batched 3-D stacks."""
    if a.ndim not in (2, 3) or a.ndim != b.ndim:
        raise ShapeError(f"matmul expects two 2D or two 3D tensors, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul inner-dimension mismatch: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _node(out_data, (a, b), backward)


def l2_normalize(v: Tensor) -> Tensor:
    """v / ||v||_2 with an epsilon guard; the zero vector maps to zero."""
    if v.ndim != 1:
        raise ShapeError(f"l2_normalize expects a vector, got {v.shape}")
    norm = float(np.sqrt(np.dot(v.data, v.data)))
    denom = max(norm, EPS_NORM)
    out_data = v.data / denom

    def backward(g):
        if norm > EPS_NORM:
            _accumulate(v, (g - out_data * np.dot(out_data, g)) / denom)
        else:
            _accumulate(v, g / denom)

    return _node(out_data, (v,), backward)


def softmax_rows(m: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction; rows sum to 1.

    Accepts an RxC matrix or a batched stack (..., R, C); the softmax always
    runs over the last axis.
    """
    if m.ndim < 2:
        raise ShapeError(f"softmax_rows expects at least 2 dims, got {m.shape}")
    if not np.all(np.isfinite(m.data)):
        raise ValueError("softmax_rows: non-finite input")
    shifted = m.data - m.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        _accumulate(m, out_data * (g - dot))

    return _node(out_data, (m,), backward)


def cosine_pairs(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs cosine similarity between columns: (P,C,M) x (P,C,N) -> (P,M,N).

    Zero columns fall back to the epsilon guard, giving cosine 0.
    """
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_pairs expects (P,C,M) and (P,C,N), got {a.shape} and {b.shape}")
    an = np.sqrt((a.data * a.data).sum(axis=1))  # (P, M)
    bn = np.sqrt((b.data * b.data).sum(axis=1))  # (P, N)
    ag = np.maximum(an, EPS_NORM)[:, None, :]
    bg = np.maximum(bn, EPS_NORM)[:, None, :]
    ahat = a.data / ag
    bhat = b.data / bg
    out_data = np.matmul(ahat.transpose(0, 2, 1), bhat)

    def backward(g):
        da_hat = np.matmul(bhat, g.transpose(0, 2, 1))           # (P,C,M)
        db_hat = np.matmul(ahat, g)                              # (P,C,N)
        # back through column normalization; for guarded columns the norm is constant
        proj_a = (ahat * da_hat).sum(axis=1, keepdims=True)
        proj_b = (bhat * db_hat).sum(axis=1, keepdims=True)
        live_a = (an > EPS_NORM)[:, None, :]
        live_b = (bn > EPS_NORM)[:, None, :]
        _accumulate(a, np.where(live_a, (da_hat - ahat * proj_a), da_hat) / ag)
        _accumulate(b, np.where(live_b, (db_hat - bhat * proj_b), db_hat) / bg)

    return _node(out_data, (a, b), backward)


def sq_distances(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise squared Euclidean distances: (Q,C) x (N,C) -> (Q,N)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"sq_distances expects (Q,C) and (N,C), got {a.shape} and {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    out_data = (diff * diff).sum(axis=2)

    def backward(g):
        gd = 2.0 * g[:, :, None] * diff
        _accumulate(a, gd.sum(axis=1))
        _accumulate(b, -gd.sum(axis=0))

    return _node(out_data, (a, b), backward)


def cross_entropy_rows(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax-probability of the true class per row."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_rows expects (R,C) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match {logits.shape[0]} rows")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(logits.shape[0])
    nll = logz - shifted[rows, labels]
    out_data = np.asarray(nll.mean(), dtype=logits.data.dtype)

    def backward(g):
        p = np.exp(shifted - logz[:, None])
        p[rows, labels] -= 1.0
        _accumulate(logits, g * p / logits.shape[0])

    return _node(out_data, (logits,), backward)


# ---------------------------------------------------------------------------
# serialization: little-endian "ALNT" blobs
# ---------------------------------------------------------------------------

TENSOR_MAGIC = b"ALNT"


def tensor_to_bytes(arr) -> bytes:
    """Serialize an array: magic, u32 rank, u64 extents, width flag, raw data."""
    data = np.ascontiguousarray(arr.data if isinstance(arr, Tensor) else arr)
    if data.dtype not in (np.float32, np.float64):
        data = data.astype(np.float64)
    width = data.dtype.itemsize
    head = TENSOR_MAGIC + struct.pack("<I", data.ndim)
    head += b"".join(struct.pack("<Q", e) for e in data.shape)
    head += struct.pack("<B", width)
    le = data.astype("<f4" if width == 4 else "<f8", copy=False)
    return head + le.tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0):
    """Inverse of tensor_to_bytes; returns (ndarray, bytes consumed)."""
    if buf[offset:offset + 4] != TENSOR_MAGIC:
        raise IOError("bad tensor magic; file is not an ALNT blob")
    pos = offset + 4
    (rank,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    shape = []
    for _ in range(rank):
        (e,) = struct.unpack_from("<Q", buf, pos)
        shape.append(int(e))
        pos += 8
    (width,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    if width not in (4, 8):
        raise IOError(f"bad payload width {width}; expected 4 or 8")
    count = int(np.prod(shape)) if shape else 1
    nbytes = count * width
    if len(buf) < pos + nbytes:
        raise IOError("truncated ALNT blob")
    dt = np.dtype("<f4" if width == 4 else "<f8")
    arr = np.frombuffer(buf[pos:pos + nbytes], dtype=dt).reshape(shape)
    native = arr.astype(dt.newbyteorder("="), copy=True).reshape(shape)
    return native, pos + nbytes - offset


def save_tensor(path, arr):
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    arr, used = tensor_from_bytes(buf)
    if used != len(buf):
        raise IOError(f"trailing bytes in tensor file {path}")
    return arr
