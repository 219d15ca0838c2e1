"""Clustering vs pooling downsample cost across token counts."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .dbtc import TokenSet, cluster_downsample, default_k


@dataclass
class BenchRow:
    mode: str
    n: int
    m: int
    channels: int
    ops: int
    seconds: float


def _grid(n: int) -> tuple[int, int]:
    h = max(1, math.isqrt(n))
    return h, -(-n // h)


def op_count(mode: str, n: int, c: int, ratio: float) -> int:
    """Deterministic arithmetic count for one downsample.

    dbtc: pairwise distances (n² pairs, ~c+3 ops each), a density and a
    separation scan over the matrix, nearest-center assignment and the
    weighted merge.  pool: every input element is added once and each
    output averaged.
    """
    if mode == "dbtc":
        m = math.ceil(ratio * n)
        return n * n * (c + 3) + 2 * n * n + n * m + 3 * n * c
    if mode == "pool":
        h, w = _grid(n)
        return h * w * c + (-(-h // 2)) * (-(-w // 2)) * c
    raise ValueError(f"unknown mode {mode!r}")


def _run_once(mode: str, tokens: np.ndarray, h: int, w: int, tau: float, k: int, ratio: float) -> int:
    n, c = tokens.shape
    if mode == "dbtc":
        ts = TokenSet.from_map(T.Tensor(tokens.T.reshape(c, h, w)))
        out, _ = cluster_downsample(ts, tau, k=k, ratio=ratio, position="none")
        return out.tokens.shape[0]
    pooled = T.mean_pool2x2(T.Tensor(tokens.T.reshape(c, h, w)))
    return pooled.shape[1] * pooled.shape[2]


def bench(sizes, channels: int = 16, tau: float = 0.5, k: int | None = None, ratio: float = 0.25,
          seed: int = 0, repeats: int = 1, timing: bool = True) -> list[BenchRow]:
    rows = []
    rng = np.random.default_rng(seed)
    for n in sizes:
        if n < 2:
            raise ValueError(f"sizes must be >= 2, got {n}")
        h, w = _grid(n)
        n_grid = h * w
        tokens = rng.standard_normal((n_grid, channels))
        kk = default_k(n_grid) if k is None else k
        for mode in ("dbtc", "pool"):
            best = math.inf
            m = 0
            if timing:
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    m = _run_once(mode, tokens, h, w, tau, kk, ratio)
                    best = min(best, time.perf_counter() - t0)
            rows.append(BenchRow(mode, n_grid, m, channels, op_count(mode, n_grid, channels, ratio), best if timing else 0.0))
    return rows


def format_table(rows: list[BenchRow], tau: float, k: int | None, ratio: float) -> str:
    head = f"# tau={tau} k={'auto' if k is None else k} ratio={ratio}"
    lines = [head, f"{'mode':<6} {'N':>7} {'M':>7} {'ops':>14} {'seconds':>10}"]
    for r in rows:
        lines.append(f"{r.mode:<6} {r.n:>7} {r.m:>7} {r.ops:>14} {r.seconds:>10.4f}")
    return "\n".join(lines)


def to_json(rows: list[BenchRow], tau: float, k: int | None, ratio: float) -> str:
    return json.dumps({"config": {"tau": tau, "k": k, "ratio": ratio}, "rows": [asdict(r) for r in rows]}, indent=1)
