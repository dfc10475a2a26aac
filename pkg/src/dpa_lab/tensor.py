"""Dense float64 tensors with tape-based reverse-mode autodiff.

The tape is implicit: every op records its parents and a VJP closure on the
output tensor; `backward()` on a scalar output walks the graph once in
reverse topological order. The graph is rebuilt by each forward pass, and a
second backward through the same output raises GraphError.

Cost accounting (used by the costing module) follows a fixed convention:
  - matmul (m x k) @ (k x n): 2*m*k*n FLOPs
  - softmax over an m x n matrix: 5*m*n FLOPs
  - elementwise ops (add, sub, mul, scale, tanh, sigmoid, softplus, abs):
    one FLOP per output element; reductions one per input element
  - data movement (transpose, concat, slice, broadcast, gather): 0 FLOPs
Activation memory counts words of *distinct* non-parameter tensors saved as
inputs of matmul/softmax, de-duplicated by identity; parameters are resident
weights and never counted. Counters are active only inside `cost_meter()`.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import GraphError, NumericError, ShapeError


class Tensor:
    __slots__ = ("data", "requires_grad", "is_param", "grad", "_parents", "_vjp", "_done")

    def __init__(self, data, requires_grad: bool = False, is_param: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.is_param = is_param
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, is_param=self.is_param)

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self):
        if self.size != 1:
            raise ShapeError(f"backward() needs a scalar output, got shape {self.shape}")
        if self._done:
            raise GraphError("backward() called twice on the same forward pass")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._vjp is not None and node.grad is not None:
                node._vjp(node.grad)
        self._done = True

    # convenience arithmetic used in tests and scripts
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, s):
        if isinstance(s, Tensor):
            return elementwise_mul(self, s)
        return scale(self, float(s))

    __rmul__ = __mul__


def _topo_order(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
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


def _result(data, parents, vjp) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


# --- cost meter -------------------------------------------------------------

class CostMeter:
    def __init__(self):
        self.flops = 0
        self.per_op = {}
        self._saved = {}

    def add(self, op: str, flops: int):
        self.flops += flops
        self.per_op[op] = self.per_op.get(op, 0) + flops

    def save(self, t: Tensor):
        if not t.is_param:
            self._saved[id(t)] = t

    @property
    def saved_words(self) -> int:
        return sum(t.size for t in self._saved.values())


_METER: CostMeter | None = None


@contextmanager
def cost_meter():
    global _METER
    prev, _METER = _METER, CostMeter()
    try:
        yield _METER
    finally:
        _METER = prev


def _meter_flops(op: str, n: int):
    if _METER is not None:
        _METER.add(op, n)


def _meter_save(*ts: Tensor):
    if _METER is not None:
        for t in ts:
            _METER.save(t)


# --- operations -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    _meter_flops("matmul", 2 * m * k * n)
    _meter_save(a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g @ bd.T)
        if b.requires_grad:
            b._accumulate(ad.T @ g)

    return _result(ad @ bd, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    _meter_flops("add", a.size)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result(a.data + b.data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    _meter_flops("sub", a.size)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _result(a.data - b.data, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    _meter_flops("scale", a.size)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(s * g)

    return _result(a.data * s, (a,), vjp)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_mul shape mismatch: {a.shape} vs {b.shape}")
    _meter_flops("mul", a.size)
    ad, bd = a.data, b.data

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g * bd)
        if b.requires_grad:
            b._accumulate(g * ad)

    return _result(ad * bd, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    def vjp(g):
        if a.requires_grad:
            a._accumulate(g.T)

    return _result(a.data.T, (a,), vjp)


def concat_rows(parts) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_rows of an empty sequence")
    cols = parts[0].shape[1]
    for p in parts:
        if p.data.ndim != 2 or p.shape[1] != cols:
            raise ShapeError(f"concat_rows column mismatch: {[p.shape for p in parts]}")
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def vjp(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accumulate(g[lo:hi])

    return _result(np.concatenate([p.data for p in parts], axis=0), parts, vjp)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError(f"slice_rows [{start}:{stop}] out of range for {a.shape}")

    def vjp(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[start:stop] = g
            a._accumulate(full)

    return _result(a.data[start:stop].copy(), (a,), vjp)


def gather_rows(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= table.shape[0])):
        raise ShapeError(f"gather_rows indices out of range for {table.shape}")

    def vjp(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            table._accumulate(full)

    return _result(table.data[idx].copy(), (table,), vjp)


def softmax_rows(x: Tensor) -> Tensor:
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows: NaN in input")
    m, n = x.shape
    _meter_flops("softmax", 5 * m * n)
    _meter_save(x)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        if x.requires_grad:
            x._accumulate(y * (g - (g * y).sum(axis=1, keepdims=True)))

    return _result(y, (x,), vjp)


def tanh_elem(x: Tensor) -> Tensor:
    _meter_flops("tanh", x.size)
    y = np.tanh(x.data)

    def vjp(g):
        if x.requires_grad:
            x._accumulate(g * (1.0 - y * y))

    return _result(y, (x,), vjp)


def sigmoid_elem(x: Tensor) -> Tensor:
    _meter_flops("sigmoid", x.size)
    y = _sigmoid(x.data)

    def vjp(g):
        if x.requires_grad:
            x._accumulate(g * y * (1.0 - y))

    return _result(y, (x,), vjp)


def softplus_elem(x: Tensor) -> Tensor:
    """Stable ln(1 + e^x) = max(x, 0) + log1p(e^-|x|)."""
    _meter_flops("softplus", x.size)
    xd = x.data

    def vjp(g):
        if x.requires_grad:
            x._accumulate(g * _sigmoid(xd))

    return _result(np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd))), (x,), vjp)


def abs_elem(x: Tensor) -> Tensor:
    _meter_flops("abs", x.size)
    xd = x.data

    def vjp(g):
        if x.requires_grad:
            x._accumulate(g * np.sign(xd))

    return _result(np.abs(xd), (x,), vjp)


def broadcast_row_vector(v: Tensor, n_rows: int) -> Tensor:
    if v.data.ndim != 2 or v.shape[0] != 1:
        raise ShapeError(f"broadcast_row_vector needs a 1 x d tensor, got {v.shape}")

    def vjp(g):
        if v.requires_grad:
            v._accumulate(g.sum(axis=0, keepdims=True))

    return _result(np.repeat(v.data, n_rows, axis=0), (v,), vjp)


def broadcast_col_vector(v: Tensor, n_cols: int) -> Tensor:
    if v.data.ndim != 2 or v.shape[1] != 1:
        raise ShapeError(f"broadcast_col_vector needs an m x 1 tensor, got {v.shape}")

    def vjp(g):
        if v.requires_grad:
            v._accumulate(g.sum(axis=1, keepdims=True))

    return _result(np.repeat(v.data, n_cols, axis=1), (v,), vjp)


def mean_rows(a: Tensor) -> Tensor:
    _meter_flops("mean_rows", a.size)
    m = a.shape[0]

    def vjp(g):
        if a.requires_grad:
            a._accumulate(np.repeat(g, m, axis=0) / m)

    return _result(a.data.mean(axis=0, keepdims=True), (a,), vjp)


def l2_normalize_rows(a: Tensor) -> Tensor:
    """Rows scaled to unit norm; all-zero rows pass through unchanged."""
    _meter_flops("l2_normalize", a.size)
    norms = np.linalg.norm(a.data, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    y = a.data / safe

    def vjp(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=1, keepdims=True)
            a._accumulate((g - y * dot) / safe)

    return _result(y, (a,), vjp)


def sum_all(a: Tensor) -> Tensor:
    _meter_flops("sum", a.size)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, g[0, 0]))

    return _result(a.data.sum(), (a,), vjp)


def mean_all(a: Tensor) -> Tensor:
    _meter_flops("mean", a.size)
    n = a.size

    def vjp(g):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, g[0, 0] / n))

    return _result(a.data.mean(), (a,), vjp)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# --- gradient checking ------------------------------------------------------

def gradcheck(f, params, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    f is a pure function of the tensors in `params` (rebuilding its forward
    graph on every call) returning a scalar Tensor. Error per coordinate is
    |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
    """
    params = list(params)
    out = f(params)
    if not np.isfinite(out.data).all():
        raise NumericError("gradcheck: non-finite function value")
    out.backward()
    analytic = []
    for p in params:
        if p.grad is None:
            analytic.append(np.zeros_like(p.data))
        else:
            analytic.append(p.grad.copy())

    worst = 0.0
    for p, g_ad in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(f(params).data)
            flat[i] = orig - h
            f_minus = float(f(params).data)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError("gradcheck: non-finite value at perturbed point")
            g_fd = (f_plus - f_minus) / (2.0 * h)
            g_a = g_ad.reshape(-1)[i]
            err = abs(g_a - g_fd) / max(1.0, abs(g_a), abs(g_fd))
            worst = max(worst, err)
    return worst
