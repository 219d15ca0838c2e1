"""Parameter registry and the small transformer layers used by every stage."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor


class ParamStore:
    """Ordered name -> leaf tensor mapping with deterministic initializers."""

    def __init__(self, rng: np.random.Generator, dtype=np.float32):
        self.rng = rng
        self.dtype = dtype
        self.tensors: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.tensors:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True)
        self.tensors[name] = t
        return t

    def affine(self, name: str, n_in: int, n_out: int, bias: bool = True) -> None:
        bound = 1.0 / math.sqrt(n_in)
        self.add(f"{name}.w", self.rng.uniform(-bound, bound, (n_in, n_out)))
        if bias:
            self.add(f"{name}.b", np.zeros(n_out))

    def norm(self, name: str, width: int) -> None:
        self.add(f"{name}.g", np.ones(width))
        self.add(f"{name}.b", np.zeros(width))

    def block(self, name: str, width: int, mlp_ratio: int) -> None:
        self.norm(f"{name}.norm1", width)
        self.affine(f"{name}.attn.q", width, width)
        self.affine(f"{name}.attn.k", width, width, bias=False)
        self.affine(f"{name}.attn.v", width, width)
        self.affine(f"{name}.attn.proj", width, width)
        self.norm(f"{name}.norm2", width)
        self.affine(f"{name}.mlp.fc1", width, mlp_ratio * width)
        self.affine(f"{name}.mlp.fc2", mlp_ratio * width, width)


def affine(p: dict[str, Tensor], name: str, x: Tensor) -> Tensor:
    return T.affine(x, p[f"{name}.w"], p.get(f"{name}.b"))


def norm(p: dict[str, Tensor], name: str, x: Tensor) -> Tensor:
    return T.layer_norm(x, p[f"{name}.g"], p[f"{name}.b"])


def attention(p: dict[str, Tensor], name: str, x: Tensor, heads: int) -> Tensor:
    n, c = x.shape
    d = c // heads

    def split(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (n, heads, d)), (1, 0, 2))

    q = split(affine(p, f"{name}.q", x))
    k = split(affine(p, f"{name}.k", x))
    v = split(affine(p, f"{name}.v", x))
    att = T.softmax_rows(T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d)))
    out = T.reshape(T.transpose(T.matmul(att, v), (1, 0, 2)), (n, c))
    return affine(p, f"{name}.proj", out)


def block(p: dict[str, Tensor], name: str, x: Tensor, heads: int) -> Tensor:
    """Pre-norm transformer block on an N×C token matrix."""
    x = T.add(x, attention(p, f"{name}.attn", norm(p, f"{name}.norm1", x), heads))
    h = T.gelu(affine(p, f"{name}.mlp.fc1", norm(p, f"{name}.norm2", x)))
    return T.add(x, affine(p, f"{name}.mlp.fc2", h))


def tokens_to_map(x: Tensor, h: int, w: int) -> Tensor:
    return T.reshape(T.transpose(x), (x.shape[1], h, w))


def map_to_tokens(f: Tensor) -> Tensor:
    c, h, w = f.shape
    return T.transpose(T.reshape(f, (c, h * w)))
