"""Windowed cross-modal interaction and statistics-gated fusion of two feature maps."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor


@dataclass
class WindowGrid:
    windows: Tensor  # n × w² × C
    height: int
    width: int
    window: int

    @property
    def n_windows(self) -> int:
        return self.windows.shape[0]


def window_partition(f: Tensor, w: int) -> WindowGrid:
    """Split C×H×W into non-overlapping w×w tiles (zero-padded bottom/right).

    Tiles are in row-major tile order, pixels row-major inside each tile.
    """
    f = T.as_tensor(f)
    if f.data.ndim != 3:
        raise DimensionError(f"window_partition: expected C×H×W, got {f.shape}")
    c, h, wd = f.shape
    if w < 1:
        raise ContractError(f"window size must be >= 1, got {w}")
    hp, wp = -(-h // w) * w, -(-wd // w) * w
    if w > hp or w > wp:
        raise ContractError(f"window {w} exceeds padded extent {hp}×{wp}")
    x = T.pad2d(f, hp - h, wp - wd)
    nh, nw = hp // w, wp // w
    x = T.reshape(x, (c, nh, w, nw, w))
    x = T.transpose(x, (1, 3, 2, 4, 0))
    return WindowGrid(T.reshape(x, (nh * nw, w * w, c)), h, wd, w)


def window_merge(g: WindowGrid) -> Tensor:
    w = g.window
    nh, nw = -(-g.height // w), -(-g.width // w)
    n, px, c = g.windows.shape
    if n != nh * nw or px != w * w:
        raise ContractError(
            f"window_merge: {n} windows of {px} pixels inconsistent with {g.height}×{g.width} at w={w}"
        )
    x = T.reshape(g.windows, (nh, nw, w, w, c))
    x = T.transpose(x, (4, 0, 2, 1, 3))
    x = T.reshape(x, (c, nh * w, nw * w))
    return T.crop2d(x, g.height, g.width)


def cross_window_interaction(wr: Tensor, wt: Tensor) -> tuple[Tensor, Tensor]:
    """Per window, each modality attends to the other's pixels.

    Returns ``(I_R, I_T)`` with I_R = softmax(W_R W_Tᵀ/√C) W_T and the
    mirror image for I_T.
    """
    if wr.shape != wt.shape:
        raise DimensionError(f"cross_window_interaction: {wr.shape} vs {wt.shape}")
    s = 1.0 / math.sqrt(wr.shape[-1])

    def attend(a: Tensor, b: Tensor) -> Tensor:
        return T.matmul(T.softmax_rows(T.scale(T.matmul(a, T.transpose(b, (0, 2, 1))), s)), b)

    return attend(wr, wt), attend(wt, wr)


@dataclass
class ChannelGate:
    """Two-layer perceptron: per-channel (mean, max, var) -> one sigmoid weight per channel."""

    w1: Tensor  # 3C × hidden
    b1: Tensor
    w2: Tensor  # hidden × C
    b2: Tensor

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, dtype=np.float32) -> ChannelGate:
        hidden = max(1, channels // 2)
        bound = 1.0 / math.sqrt(3 * channels)
        return cls(
            Tensor(rng.uniform(-bound, bound, (3 * channels, hidden)).astype(dtype), requires_grad=True),
            Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True),
            Tensor(np.zeros((hidden, channels), dtype=dtype), requires_grad=True),
            Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
        )


def channel_gate(f_r: Tensor, f_t: Tensor, gate: ChannelGate) -> Tensor:
    if f_r.shape != f_t.shape:
        raise DimensionError(f"channel_gate: {f_r.shape} vs {f_t.shape}")
    stats = T.channel_stats(T.add(f_r, f_t))
    flat = T.reshape(stats, (1, -1))
    hidden = T.relu(T.affine(flat, gate.w1, gate.b1))
    return T.reshape(T.sigmoid(T.affine(hidden, gate.w2, gate.b2)), (f_r.shape[0],))


def mif_fuse(f_r: Tensor, f_t: Tensor, w: int, gate: ChannelGate) -> Tensor:
    """F_R + F_T + s*I_R + s*I_T, summed so that swapping modalities is bitwise neutral."""
    if f_r.shape != f_t.shape:
        raise DimensionError(f"mif_fuse: {f_r.shape} vs {f_t.shape}")
    gr, gt = window_partition(f_r, w), window_partition(f_t, w)
    ir, it = cross_window_interaction(gr.windows, gt.windows)
    ir_map = window_merge(WindowGrid(ir, gr.height, gr.width, w))
    it_map = window_merge(WindowGrid(it, gt.height, gt.width, w))
    s = T.reshape(channel_gate(f_r, f_t, gate), (-1, 1, 1))
    return T.add(T.add(f_r, f_t), T.add(T.mul(ir_map, s), T.mul(it_map, s)))
