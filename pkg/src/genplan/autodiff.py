"""Dense-tensor reverse-mode automatic differentiation over numpy, plus an
adaptive-moment optimizer and parameter-store serialization.

The op set is exactly what the network modules need: affine maps, relu,
log-softmax, concatenation, reductions, row gathers, and segment pooling
over sorted contiguous group layouts (graphs batched block-diagonally keep
all segment ids sorted by construction). Forward results are deterministic:
reductions use fixed numpy evaluation order.
"""

from __future__ import annotations

import json
import struct
from contextlib import contextmanager

import numpy as np

MAGIC = b"GPLN"
FORMAT_VERSION = 1


class ShapeMismatch(Exception):
    pass


class NonScalarLoss(Exception):
    pass


class CheckpointError(Exception):
    pass


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (rollouts, evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._bwd = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(data, parents: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and affine ops


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(data, (a, b), bwd)


def neg(a) -> Tensor:
    a = _wrap(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(data, (a, b), bwd)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _make(data, (a, b), bwd)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only where unclamped."""
    a = _wrap(a)
    data = np.clip(a.data, lo, hi)

    def bwd(g):
        return (g * ((a.data >= lo) & (a.data <= hi)),)

    return _make(data, (a,), bwd)


def minimum(a, b) -> Tensor:
    """Elementwise min; the gradient follows the smaller operand (ties go
    to the first)."""
    a, b = _wrap(a), _wrap(b)
    data = np.minimum(a.data, b.data)
    take_a = a.data <= b.data

    def bwd(g):
        return (
            _unbroadcast(g * take_a, a.data.shape),
            _unbroadcast(g * ~take_a, b.data.shape),
        )

    return _make(data, (a, b), bwd)


def relu(a) -> Tensor:
    a = _wrap(a)
    data = np.maximum(a.data, 0)

    def bwd(g):
        return (g * (a.data > 0),)

    return _make(data, (a,), bwd)


def exp(a) -> Tensor:
    a = _wrap(a)
    data = np.exp(a.data)

    def bwd(g):
        return (g * data,)

    return _make(data, (a,), bwd)


def log(a) -> Tensor:
    a = _wrap(a)
    data = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _make(data, (a,), bwd)


def linear(x, w, b) -> Tensor:
    """x @ w + b for x [N, in], w [in, out], b [out]."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    if x.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeMismatch(f"linear {x.data.shape} @ {w.data.shape}")
    data = x.data @ w.data + b.data

    def bwd(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _make(data, (x, w, b), bwd)


def linear_relu(x, w, b) -> Tensor:
    """relu(x @ w + b), fused to keep one activation on the tape."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    if x.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeMismatch(f"linear_relu {x.data.shape} @ {w.data.shape}")
    data = np.maximum(x.data @ w.data + b.data, 0)

    def bwd(g):
        gm = g * (data > 0)
        return gm @ w.data.T, x.data.T @ gm, gm.sum(axis=0)

    return _make(data, (x, w, b), bwd)


# ---------------------------------------------------------------------------
# Shape ops


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(ts), bwd)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    data = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return _make(data, (a,), bwd)


def gather_rows(a, plan) -> Tensor:
    """Row gather out[k] = a[idx[k]]; ``plan`` is an index array or a
    prebuilt GatherPlan (reusable scatter layout for the backward pass)."""
    a = _wrap(a)
    if not isinstance(plan, GatherPlan):
        plan = GatherPlan(plan, a.data.shape[0])
    data = a.data[plan.idx]

    def bwd(g):
        out = np.zeros_like(a.data)
        if plan.idx.size:
            sums = np.add.reduceat(g[plan.order], plan.run_starts, axis=0)
            out[plan.unique] = sums
        return (out,)

    return _make(data, (a,), bwd)


class GatherPlan:
    """Precomputed scatter layout for the backward pass of a row gather."""

    __slots__ = ("idx", "num_rows", "order", "run_starts", "unique")

    def __init__(self, idx, num_rows: int):
        self.idx = np.asarray(idx, dtype=np.int64)
        self.num_rows = int(num_rows)
        if self.idx.size and (self.idx.min() < 0 or self.idx.max() >= num_rows):
            raise ShapeMismatch("gather index out of range")
        self.order = np.argsort(self.idx, kind="stable")
        sorted_idx = self.idx[self.order]
        if sorted_idx.size:
            change = np.nonzero(np.diff(sorted_idx))[0] + 1
            self.run_starts = np.concatenate([[0], change])
            self.unique = sorted_idx[self.run_starts]
        else:
            self.run_starts = np.zeros(0, dtype=np.int64)
            self.unique = np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# Reductions


def reduce_sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, a.data.shape).copy(),)

    return _make(data, (a,), bwd)


def reduce_mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge / count, a.data.shape).copy(),)

    return _make(data, (a,), bwd)


def reduce_max(a, axis: int, keepdims: bool = False) -> Tensor:
    """Max over one axis; gradient routes to the first maximum."""
    a = _wrap(a)
    data = a.data.max(axis=axis, keepdims=keepdims)
    argmax = np.expand_dims(a.data.argmax(axis=axis), axis)

    def bwd(g):
        ge = g if keepdims else np.expand_dims(g, axis)
        out = np.zeros_like(a.data)
        np.put_along_axis(out, argmax, ge, axis)
        return (out,)

    return _make(data, (a,), bwd)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bwd(g):
        return (g - np.exp(data) * g.sum(axis=axis, keepdims=True),)

    return _make(data, (a,), bwd)


# ---------------------------------------------------------------------------
# Segment ops (sorted contiguous segments)


class Segments:
    """A partition of rows 0..total into consecutive segments."""

    __slots__ = ("counts", "starts", "num_segments", "total", "_row_to_seg", "_nonempty")

    def __init__(self, counts):
        self.counts = np.asarray(counts, dtype=np.int64)
        if self.counts.size and self.counts.min() < 0:
            raise ShapeMismatch("negative segment count")
        self.starts = np.concatenate([[0], np.cumsum(self.counts)])
        self.num_segments = len(self.counts)
        self.total = int(self.starts[-1])
        self._row_to_seg = None
        self._nonempty = None

    @property
    def row_to_seg(self) -> np.ndarray:
        if self._row_to_seg is None:
            self._row_to_seg = np.repeat(
                np.arange(self.num_segments, dtype=np.int64), self.counts
            )
        return self._row_to_seg

    @property
    def nonempty(self) -> np.ndarray:
        if self._nonempty is None:
            self._nonempty = np.nonzero(self.counts > 0)[0]
        return self._nonempty

    def check(self, data: np.ndarray):
        if data.shape[0] != self.total:
            raise ShapeMismatch(
                f"segment data has {data.shape[0]} rows, layout expects {self.total}"
            )


def _np_segment_sum(data: np.ndarray, segs: Segments) -> np.ndarray:
    out = np.zeros((segs.num_segments,) + data.shape[1:], dtype=data.dtype)
    ne = segs.nonempty
    if ne.size and data.shape[0]:
        out[ne] = np.add.reduceat(data, segs.starts[ne], axis=0)
    return out


def segment_sum(a, segs: Segments) -> Tensor:
    """Sum rows by segment; empty segments yield zero rows."""
    a = _wrap(a)
    segs.check(a.data)
    data = _np_segment_sum(a.data, segs)

    def bwd(g):
        return (np.repeat(g, segs.counts, axis=0),)

    return _make(data, (a,), bwd)


def segment_mean(a, segs: Segments) -> Tensor:
    a = _wrap(a)
    segs.check(a.data)
    denom = np.maximum(segs.counts, 1).astype(a.data.dtype)
    scale = (1.0 / denom).reshape((-1,) + (1,) * (a.data.ndim - 1))
    data = _np_segment_sum(a.data, segs) * scale

    def bwd(g):
        return (np.repeat(g * scale, segs.counts, axis=0),)

    return _make(data, (a,), bwd)


def segment_max(a, segs: Segments) -> Tensor:
    """Max rows by segment; empty segments yield zero rows (empty-pool
    convention for isolated nodes). Gradient routes to the first maximum."""
    a = _wrap(a)
    segs.check(a.data)
    data = np.zeros((segs.num_segments,) + a.data.shape[1:], dtype=a.data.dtype)
    ne = segs.nonempty
    if ne.size and a.data.shape[0]:
        data[ne] = np.maximum.reduceat(a.data, segs.starts[ne], axis=0)

    def bwd(g):
        if not a.data.shape[0]:
            return (np.zeros_like(a.data),)
        expanded_max = np.repeat(data, segs.counts, axis=0)
        mask = a.data == expanded_max
        cs = np.cumsum(mask, axis=0, dtype=np.int64)
        base = np.zeros((segs.num_segments,) + cs.shape[1:], dtype=np.int64)
        has_prefix = segs.starts[:-1] > 0
        base[has_prefix] = cs[segs.starts[:-1][has_prefix] - 1]
        within = cs - np.repeat(base, segs.counts, axis=0)
        first = mask & (within == 1)
        return (np.where(first, np.repeat(g, segs.counts, axis=0), 0),)

    return _make(data, (a,), bwd)


def segment_log_softmax(a, segs: Segments) -> Tensor:
    """Per-segment log-softmax of a 1-D score vector."""
    a = _wrap(a)
    if a.data.ndim != 1:
        raise ShapeMismatch("segment_log_softmax expects a 1-D tensor")
    segs.check(a.data)
    maxes = np.zeros(segs.num_segments, dtype=a.data.dtype)
    ne = segs.nonempty
    if ne.size and a.data.shape[0]:
        maxes[ne] = np.maximum.reduceat(a.data, segs.starts[ne], axis=0)
    z = a.data - maxes[segs.row_to_seg]
    sums = _np_segment_sum(np.exp(z), segs)
    lse = np.log(np.where(sums > 0, sums, 1.0))
    data = z - lse[segs.row_to_seg]

    def bwd(g):
        gsum = _np_segment_sum(g, segs)
        return (g - np.exp(data) * gsum[segs.row_to_seg],)

    return _make(data, (a,), bwd)


# ---------------------------------------------------------------------------
# Backward pass


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of every requires-grad leaf."""
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._bwd is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        parent_grads = node._bwd(g)
        for parent, pg in zip(node._parents, parent_grads):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# Parameters and optimizer


def uniform_fan_in(shape, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)); fan_in is the first axis."""
    bound = 1.0 / np.sqrt(shape[0]) if shape and shape[0] > 0 else 1.0
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ParamStore:
    """Named trainable tensors plus their optimizer moments."""

    def __init__(self, dtype=np.float32):
        self.dtype = dtype
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def create(self, name: str, shape, rng: np.random.Generator | None = None,
               init: str = "fan_in") -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        if init == "fan_in":
            data = uniform_fan_in(tuple(shape), rng, self.dtype)
        elif init == "zeros":
            data = np.zeros(shape, dtype=self.dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        self._m[name] = np.zeros(shape, dtype=np.float64)
        self._v[name] = np.zeros(shape, dtype=np.float64)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grad_global_norm(self) -> float:
        total = 0.0
        for t in self._params.values():
            if t.grad is not None:
                total += float((t.grad.astype(np.float64) ** 2).sum())
        return float(np.sqrt(total))

    def clip_gradients(self, max_norm: float) -> float:
        """Scale all gradients so the global norm is at most ``max_norm``."""
        norm = self.grad_global_norm()
        if norm > max_norm and norm > 0:
            scale = max_norm / norm
            for t in self._params.values():
                if t.grad is not None:
                    t.grad = t.grad * scale
        return norm

    def adam_step(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8) -> None:
        """Bias-corrected adaptive-moment update; clears gradients after."""
        self.step_count += 1
        bc1 = 1.0 - beta1**self.step_count
        bc2 = 1.0 - beta2**self.step_count
        for name, t in self._params.items():
            g = t.grad
            if g is None:
                continue
            g64 = g.astype(np.float64)
            m = self._m[name]
            v = self._v[name]
            m *= beta1
            m += (1 - beta1) * g64
            v *= beta2
            v += (1 - beta2) * g64 * g64
            update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
            t.data = (t.data.astype(np.float64) - update).astype(t.data.dtype)
        self.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def restore(self, values: dict[str, np.ndarray]) -> None:
        for name, data in values.items():
            self._params[name].data = data.copy()

    # -- serialization -------------------------------------------------------

    def save(self, path, metadata: dict | None = None) -> None:
        manifest = []
        blobs = []
        offset = 0
        for name, t in self._params.items():
            blob = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
            manifest.append({"name": name, "shape": list(t.data.shape), "offset": offset})
            blobs.append(blob)
            offset += len(blob)
        header = json.dumps({"meta": metadata or {}, "tensors": manifest}).encode()
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", FORMAT_VERSION))
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for blob in blobs:
                fh.write(blob)

    @classmethod
    def load(cls, path, dtype=np.float32) -> tuple["ParamStore", dict]:
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) < 16 or raw[:4] != MAGIC:
            raise CheckpointError(f"{path}: not a parameter container")
        version = struct.unpack("<I", raw[4:8])[0]
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported container version {version}")
        header_len = struct.unpack("<Q", raw[8:16])[0]
        try:
            header = json.loads(raw[16 : 16 + header_len])
            tensors = header["tensors"]
            meta = header["meta"]
        except (ValueError, KeyError) as exc:
            raise CheckpointError(f"{path}: corrupt manifest") from exc
        payload = raw[16 + header_len :]
        store = cls(dtype=dtype)
        for entry in tensors:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = entry["offset"]
            try:
                flat = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
            except ValueError as exc:
                raise CheckpointError(
                    f"{path}: truncated payload for {entry['name']}"
                ) from exc
            t = store.create(entry["name"], shape, init="zeros")
            t.data = flat.reshape(shape).astype(dtype)
        return store, meta
