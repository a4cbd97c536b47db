"""Minimal dense-tensor reverse-mode differentiation over float64 numpy arrays.

Every operation records its inputs and a local backward rule on the output
tensor; `backward` walks the recorded graph once in reverse topological
order. Single-threaded by design: a graph and its tensors belong to one
logical thread, but parameter snapshots (plain arrays) may be shared
read-only.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

# When enabled, every op asserts its output is finite and aborts on NaN/Inf.
DEBUG_CHECKS = False

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A float64 array plus an optional gradient and backward recipe."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjps", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple = ()
        self._backward_ran = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, grad={'set' if self.grad is not None else 'none'})"

    # operator sugar; scalars and arrays are wrapped as constants
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


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t._parents for t in tensors)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjps: tuple) -> Tensor:
    if DEBUG_CHECKS and not np.isfinite(data).all():
        raise FloatingPointError("non-finite value produced by a primitive op")
    out = Tensor(data)
    if _tracked(*parents):
        out._parents = parents
        out._vjps = vjps
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def topo_order(root: Tensor) -> list[Tensor]:
    """Reverse-mode visitation order: every reachable node exactly once."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from `loss`.

    The loss must be a scalar. Rerunning backward on the same loss without
    rebuilding the graph is rejected.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward_ran:
        raise RuntimeError("backward already ran for this graph; rebuild the forward pass first")
    loss._backward_ran = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        for parent, vjp in zip(node._parents, node._vjps):
            if not (parent.requires_grad or parent._parents):
                continue
            contribution = vjp(g)
            if id(parent) in grads:
                grads[id(parent)] += contribution
            else:
                grads[id(parent)] = contribution


def zero_grads(params) -> None:
    for p in params.values() if isinstance(params, dict) else params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(
        a.data + b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(
        a.data - b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(
        a.data * b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.shape),
            lambda g: _unbroadcast(g * a.data, b.shape),
        ),
    )


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul requires tensors with at least 2 dimensions")
    return _make(
        a.data @ b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape),
            lambda g: _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape),
        ),
    )


def relu(x) -> Tensor:
    x = _wrap(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), (lambda g: g * mask,))


def gelu(x) -> Tensor:
    x = _wrap(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
    return _make(x.data * cdf, (x,), (lambda g: g * (cdf + x.data * pdf),))


def tanh(x) -> Tensor:
    x = _wrap(x)
    y = np.tanh(x.data)
    return _make(y, (x,), (lambda g: g * (1.0 - y * y),))


def exp(x) -> Tensor:
    x = _wrap(x)
    y = np.exp(x.data)
    return _make(y, (x,), (lambda g: g * y,))


def log(x) -> Tensor:
    x = _wrap(x)
    return _make(np.log(x.data), (x,), (lambda g: g / x.data,))


def pow_const(x, p: float) -> Tensor:
    x = _wrap(x)
    return _make(x.data**p, (x,), (lambda g: g * p * x.data ** (p - 1),))


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, x.shape).copy()
        gk = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gk, x.shape).copy()

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), (vjp,))


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def softmax(x, axis: int = -1) -> Tensor:
    x = _wrap(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (x,), (lambda g: y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _wrap(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return _make(
        y, (x,), (lambda g: g - np.exp(y) * g.sum(axis=axis, keepdims=True),)
    )


def layer_norm(x, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Standardize along `axis` to zero mean / unit variance (no affine)."""
    x = _wrap(x)
    mean = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    y = centered * inv_std

    def vjp(g):
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * y).mean(axis=axis, keepdims=True)
        return inv_std * (g - gm - y * gy)

    return _make(y, (x,), (vjp,))


def embed_lookup(table, indices) -> Tensor:
    """Gather rows of a (vocab, dim) table by an integer index array."""
    table = _wrap(table)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("embedding indices must be integers")

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return gt

    return _make(table.data[idx], (table,), (vjp,))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(k):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[k], offsets[k + 1])
            return g[tuple(sl)]

        return vjp

    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        tuple(make_vjp(k) for k in range(len(tensors))),
    )


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    x = _wrap(x)
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return gx

    return _make(x.data[sl].copy(), (x,), (vjp,))


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    return _make(x.data.reshape(shape), (x,), (lambda g: g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = _wrap(x)
    axes = tuple(a % x.data.ndim for a in axes)
    inverse = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), (lambda g: g.transpose(inverse),))


def expand(x, shape) -> Tensor:
    x = _wrap(x)
    return _make(
        np.broadcast_to(x.data, shape).copy(), (x,), (lambda g: _unbroadcast(g, x.shape),)
    )


def minimum(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    take_a = a.data <= b.data
    return _make(
        np.where(take_a, a.data, b.data),
        (a, b),
        (
            lambda g: _unbroadcast(g * take_a, a.shape),
            lambda g: _unbroadcast(g * ~take_a, b.shape),
        ),
    )


def maximum(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    take_a = a.data >= b.data
    return _make(
        np.where(take_a, a.data, b.data),
        (a, b),
        (
            lambda g: _unbroadcast(g * take_a, a.shape),
            lambda g: _unbroadcast(g * ~take_a, b.shape),
        ),
    )


def clip_const(x, lo: float, hi: float) -> Tensor:
    x = _wrap(x)
    inside = (x.data > lo) & (x.data < hi)
    return _make(np.clip(x.data, lo, hi), (x,), (lambda g: g * inside,))


# ---------------------------------------------------------------------------
# composites


def linear(x, weight, bias=None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def scaled_dot_attention(q, k, v, mask=None) -> Tensor:
    """softmax(q kᵀ / sqrt(d) + mask) v with an additive exclusion mask.

    Excluded positions should carry a large negative mask value; with every
    key of a query excluded the row degrades to a uniform average.
    """
    d = q.shape[-1]
    scores = mul(matmul(q, transpose(k, tuple(range(k.data.ndim - 2)) + (-1, -2))), d**-0.5)
    if mask is not None:
        scores = add(scores, mask)
    return matmul(softmax(scores, axis=-1), v)


def cross_entropy_logits(logits, onehot, axis: int = -1) -> Tensor:
    """Per-element cross entropy; summing/averaging is left to the caller."""
    return -tsum(mul(log_softmax(logits, axis=axis), onehot), axis=axis)


# ---------------------------------------------------------------------------
# initialization and gradient checking


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape if shape is not None else (fan_in, fan_out))


def embedding_init(rng: np.random.Generator, vocab: int, dim: int) -> np.ndarray:
    return rng.normal(0.0, 0.02, size=(vocab, dim))


def gradient_check(
    f,
    params: dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict:
    """Compare analytic gradients of scalar f() against central differences.

    f must rebuild its graph from the current parameter data on every call.
    Relative error per entry is |a - n| / max(|a|, |n|, 1.0). Returns a
    report with per-tensor maxima and an overall pass flag.
    """
    zero_grads(params)
    loss = f()
    backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    per_tensor: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries_per_tensor is not None and flat.size > max_entries_per_tensor:
            gen = rng if rng is not None else np.random.default_rng(0)
            idx = gen.choice(flat.size, size=max_entries_per_tensor, replace=False)
        worst = 0.0
        for j in idx:
            orig = flat[j]
            flat[j] = orig + h
            up = f().item()
            flat[j] = orig - h
            down = f().item()
            flat[j] = orig
            numeric = (up - down) / (2.0 * h)
            a = analytic[name].reshape(-1)[j]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1.0))
        per_tensor[name] = worst

    overall = max(per_tensor.values()) if per_tensor else 0.0
    return {"per_tensor": per_tensor, "max_rel_err": overall, "passed": overall <= tol}
