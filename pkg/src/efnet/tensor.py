"""Dense tensors with tape-free reverse-mode differentiation.

Every primitive returns a new :class:`Tensor` whose ``_backward`` closure maps
the output gradient to one gradient per parent.  Nodes carry a monotonically
increasing sequence number, so reverse accumulation can replay the exact
reverse of execution order without an explicit tape.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_seq = itertools.count()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._seq = next(_seq)

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        out._op = op
        out._seq = next(_seq)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # operator sugar, used sparingly in layer code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# ---------------------------------------------------------------- graph


@dataclass
class Graph:
    """Operations reachable from a root, stored in execution order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> Graph:
        seen: set[int] = set()
        found: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._backward is not None:
                found.append(t)
                stack.extend(t._parents)
        found.sort(key=lambda t: t._seq)
        return cls(found)

    def leaves(self) -> list[Tensor]:
        out, seen = [], set()
        for node in self.nodes:
            for p in node._parents:
                if p._backward is None and p.requires_grad and id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out


def backward(loss: Tensor, graph: Graph | None = None) -> list[str]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Gradients add onto whatever is already stored; call ``zero_grad`` between
    independent passes.  Returns the op names in the order they were visited.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = Graph.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    visited = []
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        visited.append(node._op)
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=parent.dtype).reshape(parent.shape)
                else:
                    parent.grad += pg
            elif id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    if loss._backward is None and loss.requires_grad:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
    return visited


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} do not align") from None


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _const(b, a)
    _check_broadcast(a, b, "add")
    return Tensor._result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = _const(b, a)
    _check_broadcast(a, b, "sub")
    return Tensor._result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = _const(b, a)
    _check_broadcast(a, b, "mul")
    return Tensor._result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = _const(b, a)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return Tensor._result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return Tensor._result(a.data * a.dtype.type(s), (a,), lambda g: (g * s,), "scale")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    keep = a.data > lo
    return Tensor._result(np.maximum(a.data, a.dtype.type(lo)), (a,), lambda g: (g * keep,), "clamp_min")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def gelu(a: Tensor) -> Tensor:
    """tanh approximation."""
    x = a.data
    c = np.sqrt(2.0 / np.pi).astype(x.dtype)
    inner = c * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._result(out, (a,), bw, "gelu")


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return Tensor._result(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g),
        "matmul",
    )


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x`` (any number of leading axes)."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"affine: input width {x.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        grads = [(g2 @ w.data.T).reshape(x.shape), x2.T @ g2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return Tensor._result(out.reshape(*lead, w.shape[1]), parents, bw, "affine")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(range(a.data.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    ref = parts[0].shape
    for p in parts[1:]:
        if p.data.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(p.shape, ref)) if i != axis % len(ref)
        ):
            raise DimensionError(f"concat: {p.shape} does not align with {ref} off axis {axis}")
    splits = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return Tensor._result(
        np.concatenate([p.data for p in parts], axis=axis),
        tuple(parts),
        lambda g: np.split(g, splits, axis=axis),
        "concat",
    )


def pad2d(f: Tensor, bottom: int, right: int) -> Tensor:
    """Zero-pad the last two axes on the bottom/right."""
    if bottom == 0 and right == 0:
        return f
    widths = [(0, 0)] * (f.data.ndim - 2) + [(0, bottom), (0, right)]
    h, w = f.shape[-2:]
    return Tensor._result(np.pad(f.data, widths), (f,), lambda g: (g[..., :h, :w],), "pad2d")


def crop2d(f: Tensor, h: int, w: int) -> Tensor:
    if f.shape[-2:] == (h, w):
        return f
    H, W = f.shape[-2:]

    def bw(g):
        full = np.zeros(f.shape, dtype=g.dtype)
        full[..., :h, :w] = g
        return (full,)

    return Tensor._result(f.data[..., :h, :w].copy(), (f,), bw, "crop2d")


def gather_rows(a: Tensor, index) -> Tensor:
    """Rows ``a[index]``; the gradient scatter-adds back."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ContractError(f"gather_rows: index out of range for {a.shape[0]} rows")

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._result(a.data[idx], (a,), bw, "gather_rows")


def segment_sum(a: Tensor, segments, n_segments: int) -> Tensor:
    """Sum rows of ``a`` sharing a segment id; adjoint of :func:`gather_rows`."""
    seg = np.asarray(segments, dtype=np.int64)
    if seg.shape[0] != a.shape[0]:
        raise DimensionError(f"segment_sum: {seg.shape[0]} ids for {a.shape[0]} rows")
    out = np.zeros((n_segments,) + a.shape[1:], dtype=a.dtype)
    np.add.at(out, seg, a.data)
    return Tensor._result(out, (a,), lambda g: (g[seg],), "segment_sum")


# ---------------------------------------------------------------- nn pieces


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._result(out, (a,), bw, "softmax_rows")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = (inv / n) * (
            n * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return Tensor._result(out, (x, gamma, beta), bw, "layer_norm")


def channel_stats(f: Tensor) -> Tensor:
    """Per-channel (mean, max, population variance) of a C×H×W map -> C×3."""
    if f.data.ndim != 3 or f.shape[1] * f.shape[2] == 0:
        raise DimensionError(f"channel_stats: expected a nonempty C×H×W map, got {f.shape}")
    c = f.shape[0]
    flat = f.data.reshape(c, -1)
    n = flat.shape[1]
    mu = flat.mean(axis=1)
    arg = flat.argmax(axis=1)
    mx = flat[np.arange(c), arg]
    dev = flat - mu[:, None]
    var = (dev * dev).mean(axis=1)

    def bw(g):
        gf = np.broadcast_to((g[:, 0] / n)[:, None], flat.shape).copy()
        gf[np.arange(c), arg] += g[:, 1]
        gf += (2.0 / n) * g[:, 2][:, None] * dev
        return (gf.reshape(f.shape),)

    return Tensor._result(np.stack([mu, mx, var], axis=1), (f,), bw, "channel_stats")


def _interp_matrix(n_out: int, n_in: int, dtype, align_corners: bool = True) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m.astype(dtype)
    if align_corners:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    else:
        pos = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 2)
    t = pos - lo
    m[np.arange(n_out), lo] = 1.0 - t
    m[np.arange(n_out), lo + 1] += t
    return m.astype(dtype)


def upsample_bilinear(f: Tensor, h2: int, w2: int, align_corners: bool = True) -> Tensor:
    """Bilinear resize of a C×H×W map to C×h2×w2 (h2 ≥ H, w2 ≥ W).

    Corner-aligned by default (first/last samples coincide).  With
    ``align_corners=False`` source samples sit at pixel centres and the
    border is clamped.
    """
    if f.data.ndim != 3:
        raise DimensionError(f"upsample_bilinear: expected C×H×W, got {f.shape}")
    _, h, w = f.shape
    if h2 < h or w2 < w:
        raise DimensionError(f"upsample_bilinear: target {h2}×{w2} smaller than source {h}×{w}")
    if (h2, w2) == (h, w):
        return f
    ah = _interp_matrix(h2, h, f.dtype, align_corners)
    aw = _interp_matrix(w2, w, f.dtype, align_corners)
    out = ah @ f.data @ aw.T
    return Tensor._result(out, (f,), lambda g: (ah.T @ g @ aw,), "upsample_bilinear")


def mean_pool2x2(f: Tensor) -> Tensor:
    """2×2 mean pooling over the last two axes.  Odd extents use a partial
    border window averaged over its in-bounds cells."""
    h, w = f.shape[-2:]
    h2, w2 = -(-h // 2), -(-w // 2)
    ph = np.repeat(np.eye(h2, dtype=np.float64), 2, axis=1)[:, :h]
    pw = np.repeat(np.eye(w2, dtype=np.float64), 2, axis=1)[:, :w]
    ph = (ph / ph.sum(axis=1, keepdims=True)).astype(f.dtype)
    pw = (pw / pw.sum(axis=1, keepdims=True)).astype(f.dtype)
    out = ph @ f.data @ pw.T
    return Tensor._result(out, (f,), lambda g: (ph.T @ g @ pw,), "mean_pool2x2")


def pairwise_distance(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """``sqrt(eps + ||a_i - b_j||^2)`` for rows of a (K×C) and b (N×C) -> K×N."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"pairwise_distance: widths of {a.shape} and {b.shape} differ")
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = np.sqrt(eps + (diff * diff).sum(axis=-1))

    def bw(g):
        coef = (g / out)[:, :, None] * diff
        return coef.sum(axis=1), -coef.sum(axis=0)

    return Tensor._result(out, (a, b), bw, "pairwise_distance")


# ---------------------------------------------------------------- gradient check


def numeric_grad(fn: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> list[np.ndarray]:
    out = []
    for x in inputs:
        g = np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(fn(*inputs).data)
            flat[i] = orig - step
            fm = float(fn(*inputs).data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * step)
        out.append(g)
    return out


def grad_check(fn: Callable[..., Tensor], inputs: Iterable, step: float = 1e-5) -> float:
    """Max over entries of |analytic - central difference| / max(1, |central difference|).

    Inputs are copied to float64 leaves; ``fn`` must build its graph from
    its arguments (any captured constants should also be float64).
    """
    if step <= 0:
        raise ContractError("grad_check: step must be positive")
    leaves = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = fn(*leaves)
    if out.data.size != 1:
        raise ContractError(f"grad_check: function must return a scalar, got shape {out.shape}")
    backward(out)
    analytic = [x.grad if x.grad is not None else np.zeros_like(x.data) for x in leaves]
    numeric = numeric_grad(fn, leaves, step)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(n)))))
    return worst
