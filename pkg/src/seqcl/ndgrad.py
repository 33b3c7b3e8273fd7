"""Dense float64 tensors with reverse-mode automatic differentiation.

A `Tape` records every op executed inside its context; `backward` replays the
records in reverse and accumulates gradients. Ops executed with no active tape
run as plain numpy forward passes (used for frozen-model evaluation and
decoding). First-order gradients only.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "NdgradError", "ShapeError", "NonFiniteError",
    "Tensor", "Tape", "backward", "Grads",
    "as_tensor", "record",
    "add", "sub", "mul", "affine", "tanh", "relu", "softmax", "log_softmax",
    "embedding", "attention", "concat_rows", "slice_rows", "take_rc",
    "sum_", "mean_", "sq_l2norm",
    "ParamVector", "save_checkpoint", "load_checkpoint",
    "finite_diff_check",
]


class NdgradError(Exception):
    """Base class for numeric-core failures."""


class ShapeError(NdgradError):
    def __init__(self, op: str, shapes: Sequence[tuple]):
        super().__init__(f"{op}: incompatible shapes {list(shapes)}")
        self.op = op
        self.shapes = list(shapes)


class NonFiniteError(NdgradError):
    def __init__(self, op: str):
        super().__init__(f"{op}: produced non-finite values")
        self.op = op


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable-by-convention wrapper around a float64 ndarray."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


class _Node:
    __slots__ = ("out", "parents", "grad_fn")

    def __init__(self, out, parents, grad_fn):
        self.out = out
        self.parents = parents
        self.grad_fn = grad_fn


class Tape:
    """Ordered op records; creation order is a topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite_or_raise(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(op)


def record(op: str, out_data: np.ndarray, parents: tuple, grad_fn: Callable) -> Tensor:
    """Create an output tensor and register its backward rule on the active tape.

    `grad_fn(gout)` must return one gradient array (or None) per parent.
    Exposed so other modules can define fused ops (CTC, quadratic penalties).
    """
    out_data = np.asarray(out_data, dtype=np.float64)
    _finite_or_raise(op, out_data)
    t = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        tape.nodes.append(_Node(t, parents, grad_fn))
    return t


class Grads:
    """Gradient lookup keyed by tensor identity; absent tensors read as zero."""

    def __init__(self, table: dict):
        self._table = table

    def wrt(self, t: Tensor) -> np.ndarray:
        g = self._table.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g

    def param_grads(self, leaves: dict) -> "ParamVector":
        return ParamVector({name: self.wrt(t) for name, t in leaves.items()})


def backward(root: Tensor, tape: Tape) -> Grads:
    """Reverse sweep from a scalar root; each node visited exactly once."""
    if root.data.shape != ():
        raise NdgradError(f"backward: root must be scalar, got shape {root.data.shape}")
    _finite_or_raise("backward", root.data)
    table: dict[int, np.ndarray] = {id(root): np.ones(())}
    for node in reversed(tape.nodes):
        gout = table.get(id(node.out))
        if gout is None:
            continue
        pgrads = node.grad_fn(gout)
        for parent, g in zip(node.parents, pgrads):
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NonFiniteError("backward")
            pid = id(parent)
            acc = table.get(pid)
            if acc is None:
                table[pid] = g
            else:
                table[pid] = acc + g
    return Grads(table)


# ---------------------------------------------------------------------------
# elementwise / reduction ops

def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape == b.data.shape:
        return
    if a.data.shape == () or b.data.shape == ():
        return
    raise ShapeError(op, (a.data.shape, b.data.shape))


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if shape == () and g.shape != ():
        return np.asarray(g.sum())
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    out = a.data + b.data
    return record("add", out, (a, b),
                  lambda g: (_reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    out = a.data - b.data
    return record("sub", out, (a, b),
                  lambda g: (_reduce_to(g, a.data.shape), _reduce_to(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    out = a.data * b.data
    return record("mul", out, (a, b),
                  lambda g: (_reduce_to(g * b.data, a.data.shape),
                             _reduce_to(g * a.data, b.data.shape)))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return record("tanh", out, (x,), lambda g, out=out: (g * (1.0 - out * out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)
    return record("relu", out, (x,), lambda g: (g * (x.data > 0.0),))


def sum_(x) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum())
    return record("sum", out, (x,), lambda g: (np.broadcast_to(g, x.data.shape).copy(),))


def mean_(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    if n == 0:
        raise ShapeError("mean", (x.data.shape,))
    out = np.asarray(x.data.mean())
    return record("mean", out, (x,),
                  lambda g: (np.broadcast_to(g / n, x.data.shape).copy(),))


def sq_l2norm(x) -> Tensor:
    x = as_tensor(x)
    out = np.asarray((x.data * x.data).sum())
    return record("sq_l2norm", out, (x,), lambda g: (2.0 * x.data * g,))


# ---------------------------------------------------------------------------
# linear / structural ops

def affine(x, w, b=None) -> Tensor:
    """x @ w (+ b). x may be 1-D [in] or 2-D [m, in]; w is [in, out]."""
    x, w = as_tensor(x), as_tensor(w)
    if w.data.ndim != 2 or x.data.ndim not in (1, 2) or x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError("affine", (x.data.shape, w.data.shape))
    out = x.data @ w.data
    if b is not None:
        b = as_tensor(b)
        if b.data.shape != (w.data.shape[1],):
            raise ShapeError("affine", (x.data.shape, w.data.shape, b.data.shape))
        out = out + b.data

    def grad_fn(g):
        gx = g @ w.data.T
        if x.data.ndim == 1:
            gw = np.outer(x.data, g)
            gb = g.copy() if b is not None else None
        else:
            gw = x.data.T @ g
            gb = g.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return record("affine", out, parents, grad_fn)


def _rows_softmax(data: np.ndarray) -> np.ndarray:
    shifted = data - data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x) -> Tensor:
    """Row-wise softmax over the last axis (1-D or 2-D input)."""
    x = as_tensor(x)
    if x.data.ndim not in (1, 2):
        raise ShapeError("softmax", (x.data.shape,))
    out = _rows_softmax(x.data)
    return record("softmax", out, (x,),
                  lambda g, out=out: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def log_softmax(x) -> Tensor:
    """Row-wise log-softmax over the last axis (1-D or 2-D input)."""
    x = as_tensor(x)
    if x.data.ndim not in (1, 2):
        raise ShapeError("log_softmax", (x.data.shape,))
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)
    return record("log_softmax", out, (x,),
                  lambda g, sm=sm: (g - sm * g.sum(axis=-1, keepdims=True),))


def embedding(table, ids) -> Tensor:
    """Row lookup: out[i] = table[ids[i]]."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2 or ids.ndim != 1:
        raise ShapeError("embedding", (table.data.shape, ids.shape))
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise NdgradError(f"embedding: id out of range for table {table.data.shape}")
    out = table.data[ids]

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return record("embedding", out, (table,), grad_fn)


def attention(q, k, v) -> Tensor:
    """Single-head scaled dot-product attention: softmax(q kᵀ / √h) v."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if (q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2
            or q.data.shape[1] != k.data.shape[1] or k.data.shape[0] != v.data.shape[0]):
        raise ShapeError("attention", (q.data.shape, k.data.shape, v.data.shape))
    scale = 1.0 / np.sqrt(q.data.shape[1])
    a = _rows_softmax(q.data @ k.data.T * scale)
    out = a @ v.data

    def grad_fn(g):
        gv = a.T @ g
        ga = g @ v.data.T
        gs = a * (ga - (ga * a).sum(axis=1, keepdims=True))
        gq = gs @ k.data * scale
        gk = gs.T @ q.data * scale
        return gq, gk, gv

    return record("attention", out, (q, k, v), grad_fn)


def concat_rows(parts: Iterable) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts or any(p.data.ndim != 2 for p in parts):
        raise ShapeError("concat_rows", tuple(p.data.shape for p in parts))
    cols = parts[0].data.shape[1]
    if any(p.data.shape[1] != cols for p in parts):
        raise ShapeError("concat_rows", tuple(p.data.shape for p in parts))
    out = np.vstack([p.data for p in parts])
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def grad_fn(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return record("concat_rows", out, tuple(parts), grad_fn)


def slice_rows(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2 or not (0 <= start <= stop <= x.data.shape[0]):
        raise ShapeError("slice_rows", (x.data.shape, (start, stop)))
    out = x.data[start:stop].copy()

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return record("slice_rows", out, (x,), grad_fn)


def take_rc(x, rows, cols) -> Tensor:
    """Pick x[rows[i], cols[i]] into a 1-D vector."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if x.data.ndim != 2 or rows.shape != cols.shape or rows.ndim != 1:
        raise ShapeError("take_rc", (x.data.shape, rows.shape, cols.shape))
    out = x.data[rows, cols]

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return record("take_rc", out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# parameter vectors and checkpoints

class ParamVector:
    """Named float64 segments with stable insertion order.

    flatten ∘ unflatten is the identity; ordering survives save/load.
    """

    __slots__ = ("_segments",)

    def __init__(self, segments):
        if isinstance(segments, ParamVector):
            segments = segments.items()
        elif isinstance(segments, dict):
            segments = segments.items()
        self._segments: dict[str, np.ndarray] = {
            str(name): np.ascontiguousarray(arr, dtype=np.float64)
            for name, arr in segments
        }

    def items(self):
        return list(self._segments.items())

    def names(self) -> list[str]:
        return list(self._segments.keys())

    def __getitem__(self, name: str) -> np.ndarray:
        return self._segments[name]

    def __contains__(self, name: str) -> bool:
        return name in self._segments

    def __len__(self) -> int:
        return len(self._segments)

    @property
    def total_len(self) -> int:
        return sum(a.size for a in self._segments.values())

    def flat(self) -> np.ndarray:
        if not self._segments:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self._segments.values()])

    def from_flat(self, flat: np.ndarray) -> "ParamVector":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.total_len,):
            raise NdgradError(
                f"from_flat: expected length {self.total_len}, got {flat.shape}")
        out, off = {}, 0
        for name, a in self._segments.items():
            out[name] = flat[off:off + a.size].reshape(a.shape).copy()
            off += a.size
        return ParamVector(out)

    def copy(self) -> "ParamVector":
        return ParamVector({n: a.copy() for n, a in self._segments.items()})

    def zeros_like(self) -> "ParamVector":
        return ParamVector({n: np.zeros_like(a) for n, a in self._segments.items()})

    def same_layout(self, other: "ParamVector") -> bool:
        return (self.names() == other.names()
                and all(self[n].shape == other[n].shape for n in self._segments))

    def _require_layout(self, other: "ParamVector", op: str) -> None:
        if not self.same_layout(other):
            raise NdgradError(f"{op}: parameter layout mismatch")

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._require_layout(other, "add")
        return ParamVector({n: a + other[n] for n, a in self._segments.items()})

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._require_layout(other, "sub")
        return ParamVector({n: a - other[n] for n, a in self._segments.items()})

    def __mul__(self, scalar: float) -> "ParamVector":
        s = float(scalar)
        return ParamVector({n: a * s for n, a in self._segments.items()})

    __rmul__ = __mul__

    def dot(self, other: "ParamVector") -> float:
        self._require_layout(other, "dot")
        return float(sum((a * other[n]).sum() for n, a in self._segments.items()))

    def norm(self) -> float:
        return float(np.sqrt(self.dot(self)))

    def equals(self, other: "ParamVector") -> bool:
        return (self.same_layout(other)
                and all(np.array_equal(a, other[n]) for n, a in self._segments.items()))

    def allclose(self, other: "ParamVector", atol: float = 0.0, rtol: float = 1e-12) -> bool:
        return (self.same_layout(other)
                and all(np.allclose(a, other[n], atol=atol, rtol=rtol)
                        for n, a in self._segments.items()))


CKPT_MAGIC = "SEQCL-CKPT v1"


class CheckpointError(NdgradError):
    pass


def save_checkpoint(pv: ParamVector, path) -> None:
    with open(path, "wb") as fh:
        lines = [CKPT_MAGIC]
        for name, arr in pv.items():
            if any(ch.isspace() for ch in name):
                raise CheckpointError(f"segment name contains whitespace: {name!r}")
            dims = " ".join(str(d) for d in arr.shape)
            lines.append(f"seg {name} f64 {dims}".rstrip())
        lines.append("end")
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for _, arr in pv.items():
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> ParamVector:
    with open(path, "rb") as fh:
        magic = fh.readline().decode("ascii", errors="replace").rstrip("\n")
        if magic != CKPT_MAGIC:
            raise CheckpointError(f"bad or unsupported checkpoint header: {magic!r}")
        layout: list[tuple[str, tuple]] = []
        while True:
            line = fh.readline().decode("ascii", errors="replace").rstrip("\n")
            if line == "end":
                break
            if not line.startswith("seg "):
                raise CheckpointError(f"corrupt checkpoint record: {line!r}")
            fields = line.split()
            if len(fields) < 3 or fields[2] != "f64":
                raise CheckpointError(f"corrupt checkpoint record: {line!r}")
            shape = tuple(int(d) for d in fields[3:])
            layout.append((fields[1], shape))
        total = sum(int(np.prod(s)) if s else 1 for _, s in layout)
        payload = fh.read()
        if len(payload) != total * 8:
            raise CheckpointError(
                f"payload length mismatch: expected {total * 8} bytes, got {len(payload)}")
        flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
        out, off = {}, 0
        for name, shape in layout:
            n = int(np.prod(shape)) if shape else 1
            out[name] = flat[off:off + n].reshape(shape)
            off += n
        return ParamVector(out)


# ---------------------------------------------------------------------------
# gradient checking

def finite_diff_check(f: Callable, theta: ParamVector, eps: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    `f` maps a dict of named leaf Tensors to a scalar Tensor. Relative error
    uses denominator max(|analytic|, |numeric|, 1e-8) per coordinate.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise NdgradError(f"finite_diff_check: eps {eps} outside [1e-7, 1e-3]")

    with Tape() as tape:
        leaves = {name: Tensor(arr.copy()) for name, arr in theta.items()}
        out = f(leaves)
    if out.data.shape != ():
        raise NdgradError("finite_diff_check: f must return a scalar")
    analytic = backward(out, tape).param_grads(leaves).flat()

    def eval_at(flat_vals: np.ndarray) -> float:
        pv = theta.from_flat(flat_vals)
        leaves = {name: Tensor(arr) for name, arr in pv.items()}
        val = f(leaves)
        v = float(val.data)
        if not np.isfinite(v):
            raise NonFiniteError("finite_diff_check")
        return v

    base = theta.flat()
    worst = 0.0
    for i in range(base.size):
        hi = base.copy()
        hi[i] += eps
        lo = base.copy()
        lo[i] -= eps
        numeric = (eval_at(hi) - eval_at(lo)) / (2.0 * eps)
        denom = max(abs(analytic[i]), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
