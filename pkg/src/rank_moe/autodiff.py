"""Minimal reverse-mode differentiation over 2-D numpy arrays.

Every value is a :class:`Tensor` holding a ``rows x cols`` array. Ops build a
graph of parent links; :func:`backward` replays the recorded nodes in exact
reverse creation order. There is no implicit broadcasting: ops that combine a
batch with a single row (``add_row``, ``linear``) say so in their name.

Parameters live in float32. Tensors built explicitly with ``dtype=np.float64``
propagate float64 through every op, which is what the finite-difference
checks in the test-suite rely on.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
PROB_FLOOR = 1e-12

_ids = itertools.count(1)
_mode = threading.local()


def grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"Tensor must be 2-D, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accum(self, g: np.ndarray, owned: bool = False) -> None:
        """Adds ``g`` into ``self.grad``. ``owned`` marks a fresh temporary
        that may be adopted as the gradient buffer without copying."""
        if self.grad is None:
            if owned and g.dtype == self.data.dtype and g.flags.c_contiguous:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> None:
        backward(ComputeGraph.from_output(self), self)

    def __repr__(self) -> str:
        return f"Tensor({self.rows}x{self.cols}, op={self.op}, requires_grad={self.requires_grad})"

    # sugar used by tests and small toy models
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _make(arr: np.ndarray, op: str, parents: Sequence[Tensor]) -> Tensor:
    # a non-finite entry always makes the sum non-finite; the exact scan only
    # runs in that case (or when a finite sum overflows)
    if not np.isfinite(arr.sum()) and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite value produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.grad = None
    out.op = op
    out._id = next(_ids)
    out._backward = None
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = tuple(parents) if needs else ()
    return out


def _shape_check(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


@dataclass
class ComputeGraph:
    """Nodes reachable from an output, in forward (creation) order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "ComputeGraph":
        seen: set[int] = set()
        found: list[Tensor] = []
        stack = [out]
        while stack:
            t = stack.pop()
            if t._id in seen:
                continue
            seen.add(t._id)
            found.append(t)
            stack.extend(t._parents)
        found.sort(key=lambda t: t._id)
        return cls(found)


def backward(graph: ComputeGraph, loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring tensor reachable from ``loss``.

    Leaf gradients accumulate; zero them between steps.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    if not loss.requires_grad:
        return
    loss._accum(np.ones_like(loss.data))
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward()
            # intermediate grads are not needed once propagated
            if node._parents:
                node.grad = None if node is not loss else node.grad


# ---------------------------------------------------------------- core ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = _make(a.data @ b.data, "matmul", (a, b))
    if out.requires_grad:

        def _bw():
            g = out.grad
            if a.requires_grad:
                a._accum(g @ b.data.T)
            if b.requires_grad:
                b._accum(a.data.T @ g)

        out._backward = _bw
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    _shape_check("add", a, b)
    out = _make(a.data + b.data, "add", (a, b))
    if out.requires_grad:

        def _bw():
            if a.requires_grad:
                a._accum(out.grad)
            if b.requires_grad:
                b._accum(out.grad)

        out._backward = _bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _shape_check("mul", a, b)
    out = _make(a.data * b.data, "mul", (a, b))
    if out.requires_grad:

        def _bw():
            if a.requires_grad:
                a._accum(out.grad * b.data)
            if b.requires_grad:
                b._accum(out.grad * a.data)

        out._backward = _bw
    return out


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "mul":
        return mul(a, b)
    if kind == "add":
        return add(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def add_row(a: Tensor, row: Tensor) -> Tensor:
    """Add a 1 x cols row to every row of ``a`` (explicit, not broadcasting)."""
    if row.rows != 1 or row.cols != a.cols:
        raise ShapeError(f"add_row: row {row.shape} does not fit {a.shape}")
    out = _make(a.data + row.data, "add_row", (a, row))
    if out.requires_grad:

        def _bw():
            if a.requires_grad:
                a._accum(out.grad)
            if row.requires_grad:
                row._accum(out.grad.sum(axis=0, keepdims=True))

        out._backward = _bw
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``b`` a single row added to every row."""
    if x.cols != w.rows:
        raise ShapeError(f"linear: input {x.shape} vs weight {w.shape}")
    if b is not None and (b.rows != 1 or b.cols != w.cols):
        raise ShapeError(f"linear: bias {b.shape} vs weight {w.shape}")
    y = x.data @ w.data
    if b is not None:
        y += b.data
    parents = (x, w) if b is None else (x, w, b)
    out = _make(y, "linear", parents)
    if out.requires_grad:

        def _bw():
            g = out.grad
            if x.requires_grad:
                x._accum(g @ w.data.T, owned=True)
            if w.requires_grad:
                w._accum(x.data.T @ g, owned=True)
            if b is not None and b.requires_grad:
                b._accum(g.sum(axis=0, keepdims=True), owned=True)

        out._backward = _bw
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = _make(a.data * a.data.dtype.type(c), "scale", (a,))
    if out.requires_grad:

        def _bw():
            a._accum(out.grad * a.data.dtype.type(c))

        out._backward = _bw
    return out


def sum_all(a: Tensor) -> Tensor:
    out = _make(a.data.sum(dtype=a.data.dtype).reshape(1, 1), "sum", (a,))
    if out.requires_grad:

        def _bw():
            a._accum(np.full_like(a.data, out.grad[0, 0]))

        out._backward = _bw
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = _make(np.where(mask, a.data, 0).astype(a.data.dtype), "relu", (a,))
    if out.requires_grad:

        def _bw():
            a._accum(out.grad * mask)

        out._backward = _bw
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    half = x.dtype.type(0.5)
    return half * (1 + np.tanh(half * x))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = _make(s, "sigmoid", (a,))
    if out.requires_grad:

        def _bw():
            a._accum(out.grad * s * (1 - s))

        out._backward = _bw
    return out


def activation(a: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown activation {kind!r}")


def softmax_rows(a: Tensor) -> Tensor:
    if a.cols < 1:
        raise ShapeError("softmax_rows needs at least one column")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = _make(p, "softmax", (a,))
    if out.requires_grad:

        def _bw():
            g = out.grad
            a._accum(p * (g - (g * p).sum(axis=1, keepdims=True)))

        out._backward = _bw
    return out


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols of nothing")
    rows = parts[0].rows
    for p in parts:
        if p.rows != rows:
            raise ShapeError(f"concat_cols: row mismatch {[q.shape for q in parts]}")
    if len(parts) == 1:
        return parts[0]
    out = _make(np.concatenate([p.data for p in parts], axis=1), "concat", parts)
    if out.requires_grad:
        bounds = np.cumsum([0] + [p.cols for p in parts])

        def _bw():
            for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
                if p.requires_grad:
                    p._accum(out.grad[:, lo:hi])

        out._backward = _bw
    return out


def dropout(a: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity outside training or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = rng.random(a.shape, dtype=np.float32) >= rate
    factor = keep.astype(a.data.dtype)
    factor *= a.data.dtype.type(1.0 / (1.0 - rate))
    out = _make(a.data * factor, "dropout", (a,))
    if out.requires_grad:

        def _bw():
            a._accum(out.grad * factor)

        out._backward = _bw
    return out


def stop_gradient(a: Tensor) -> Tensor:
    return _make(a.data, "stop_gradient", ())


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Embedding lookup: row ``index[i]`` of ``table`` becomes output row i."""
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    if index.size and (index.min() < 0 or index.max() >= table.rows):
        raise IndexError(f"gather_rows: index out of range for table with {table.rows} rows")
    out = _make(table.data[index], "gather", (table,))
    if out.requires_grad:

        def _bw():
            g = np.zeros_like(table.data)
            np.add.at(g, index, out.grad)
            table._accum(g)

        out._backward = _bw
    return out


def mixture(gates: Tensor, experts: Sequence[Tensor]) -> Tensor:
    """Row-wise ``sum_i gates[:, i] * experts[i]``."""
    if gates.cols != len(experts):
        raise ShapeError(f"mixture: {gates.cols} gate columns for {len(experts)} experts")
    shape = experts[0].shape
    for e in experts:
        if e.shape != shape or e.rows != gates.rows:
            raise ShapeError("mixture: expert outputs must share shape and batch size")
    stacked = np.stack([e.data for e in experts], axis=1)  # B x n x d
    y = np.einsum("bn,bnd->bd", gates.data, stacked)
    out = _make(y, "mixture", (gates, *experts))
    if out.requires_grad:

        def _bw():
            g = out.grad
            if gates.requires_grad:
                gates._accum(np.einsum("bd,bnd->bn", g, stacked))
            for i, e in enumerate(experts):
                if e.requires_grad:
                    e._accum(g * gates.data[:, i : i + 1])

        out._backward = _bw
    return out


def attention(q: Tensor, k: Tensor, v: Tensor, lengths: np.ndarray) -> Tensor:
    """Single-head scaled dot-product attention over per-row variable-length keys.

    ``q`` is B x d. ``k`` and ``v`` are (B*L) x d, holding L slots per query
    row of which only the first ``lengths[b]`` are real. Rows with no real key
    produce zeros.
    """
    lengths = np.asarray(lengths, dtype=np.int64).reshape(-1)
    bsz, d = q.shape
    if lengths.size != bsz:
        raise ShapeError(f"attention: {lengths.size} lengths for batch of {bsz}")
    if k.shape != v.shape or k.cols != d:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    slots = k.rows // bsz if bsz else 0
    if slots * bsz != k.rows:
        raise ShapeError("attention: key rows are not a multiple of the batch size")
    dt = q.data.dtype
    if slots == 0:
        return _make(np.zeros((bsz, v.cols), dtype=dt), "attention", (q, k, v))
    K = k.data.reshape(bsz, slots, d)
    V = v.data.reshape(bsz, slots, d)
    inv = dt.type(1.0 / np.sqrt(d))
    mask = np.arange(slots)[None, :] < lengths[:, None]
    s = np.einsum("bd,bld->bl", q.data, K) * inv
    s = np.where(mask, s, -np.inf)
    has = mask.any(axis=1)
    s[~has] = 0.0
    e = np.exp(s - s.max(axis=1, keepdims=True))
    e = np.where(mask, e, 0)
    denom = e.sum(axis=1, keepdims=True)
    a = (e / np.where(denom > 0, denom, 1)).astype(dt)
    y = np.einsum("bl,bld->bd", a, V)
    out = _make(y, "attention", (q, k, v))
    if out.requires_grad:

        def _bw():
            g = out.grad
            da = np.einsum("bd,bld->bl", g, V)
            ds = a * (da - (a * da).sum(axis=1, keepdims=True)) * inv
            if q.requires_grad:
                q._accum(np.einsum("bl,bld->bd", ds, K))
            if k.requires_grad:
                k._accum((ds[:, :, None] * q.data[:, None, :]).reshape(k.shape))
            if v.requires_grad:
                v._accum((a[:, :, None] * g[:, None, :]).reshape(v.shape))

        out._backward = _bw
    return out


def cross_entropy(probs: Tensor, labels: np.ndarray, weights: np.ndarray) -> Tensor:
    """``sum_b weights[b] * -ln(max(probs[b, labels[b]], 1e-12))`` as a 1x1 tensor."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    weights = np.asarray(weights, dtype=probs.data.dtype).reshape(-1)
    if labels.size != probs.rows or weights.size != probs.rows:
        raise ShapeError("cross_entropy: labels/weights must have one entry per row")
    rows = np.arange(probs.rows)
    picked = probs.data[rows, labels]
    clamped = np.maximum(picked, probs.data.dtype.type(PROB_FLOOR))
    loss = np.array([[np.sum(-weights * np.log(clamped))]], dtype=probs.data.dtype)
    out = _make(loss, "cross_entropy", (probs,))
    if out.requires_grad:

        def _bw():
            g = np.zeros_like(probs.data)
            active = picked >= PROB_FLOOR
            g[rows, labels] = np.where(active, -weights / clamped, 0) * out.grad[0, 0]
            probs._accum(g)

        out._backward = _bw
    return out


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam with bias correction. Zeroes gradients after every step."""

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 1e-5,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = dict(sorted(params.items()))
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self._scratch: dict[str, np.ndarray] = {}
        # Moments of parameters with (near) zero gradient decay into the
        # subnormal range, where x86 arithmetic is very slow. Their effect on
        # the update is far below one ulp, so they are periodically zeroed.
        self.flush_every = 16

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        lr_t = self.lr / c1
        inv_c2 = 1.0 / np.sqrt(c2)
        for name, p in self.params.items():
            g = p.grad
            m, v = self.m[name], self.v[name]
            if m.dtype != p.data.dtype:  # parameters were cast after construction
                self.m[name] = m = m.astype(p.data.dtype)
                self.v[name] = v = v.astype(p.data.dtype)
            tmp = self._scratch.get(name)
            if tmp is None or tmp.shape != g.shape or tmp.dtype != p.data.dtype:
                tmp = self._scratch[name] = np.empty_like(p.data)
            m *= b1
            np.multiply(g, 1 - b1, out=tmp)
            m += tmp
            v *= b2
            np.multiply(g, g, out=tmp)
            tmp *= 1 - b2
            v += tmp
            np.sqrt(v, out=tmp)
            tmp *= inv_c2
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= lr_t
            p.data -= tmp
            g.fill(0)
            if t % self.flush_every == 0:
                _flush_subnormals(m, tmp)
                _flush_subnormals(v, tmp)


def _flush_subnormals(a: np.ndarray, scratch: np.ndarray) -> None:
    np.abs(a, out=scratch)
    np.copyto(a, 0, where=scratch < np.finfo(a.dtype).tiny)


def adam_step(state: Adam, params: Mapping[str, Tensor] | None = None) -> None:
    if params is not None and set(params) != set(state.params):
        raise ValueError("parameter set does not match optimizer state")
    state.step()


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
