"""Density-peaks token clustering over a combined semantic + spatial distance.

Index decisions (neighbour sets, centers, assignments) are computed on
detached float64 copies of the features; only the merge and the
importance-biased attention are differentiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

POSITION_MODES = ("none", "pe", "pce")


@dataclass
class TokenSet:
    tokens: Tensor  # N×C
    coords: np.ndarray  # N×2, normalized (row, col)
    importance: np.ndarray  # N
    grid_h: int
    grid_w: int

    def __post_init__(self):
        self.tokens = T.as_tensor(self.tokens)
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.importance = np.asarray(self.importance, dtype=np.float64).reshape(-1)
        n = self.tokens.shape[0]
        if n < 1 or self.tokens.data.ndim != 2:
            raise DimensionError(f"TokenSet needs an N×C token matrix with N ≥ 1, got {self.tokens.shape}")
        if self.coords.shape != (n, 2) or self.importance.shape != (n,):
            raise DimensionError(
                f"TokenSet: coords {self.coords.shape} / importance {self.importance.shape} do not match {n} tokens"
            )
        if not np.all((self.coords >= 0.0) & (self.coords <= 1.0)):
            raise ContractError("TokenSet: coords must lie in [0, 1]")
        if not np.all(np.isfinite(self.importance)):
            raise ContractError("TokenSet: importance must be finite")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @classmethod
    def from_map(cls, f: Tensor, importance=None) -> TokenSet:
        """Tokens of a C×H×W map in row-major pixel order with grid coordinates."""
        c, h, w = f.shape
        tokens = T.transpose(T.reshape(f, (c, h * w)))
        return cls(tokens, grid_coords(h, w), np.zeros(h * w) if importance is None else importance, h, w)


@dataclass
class ClusterResult:
    distance: np.ndarray
    density: np.ndarray
    separation: np.ndarray
    score: np.ndarray
    centers: list[int]
    assignment: np.ndarray
    merged: Tensor
    importance: np.ndarray = field(default=None)

    @property
    def n_clusters(self) -> int:
        return len(self.centers)


def grid_coords(h: int, w: int) -> np.ndarray:
    r = np.arange(h, dtype=np.float64) / max(h - 1, 1)
    c = np.arange(w, dtype=np.float64) / max(w - 1, 1)
    rr, cc = np.meshgrid(r, c, indexing="ij")
    return np.stack([rr.reshape(-1), cc.reshape(-1)], axis=1)


class PixelCoordEncoding:
    """Learnable per-axis affine map on normalized coordinates; identity at init."""

    def __init__(self, scale: Tensor | None = None, offset: Tensor | None = None, dtype=np.float32):
        self.scale = scale if scale is not None else Tensor(np.ones(2, dtype=dtype), requires_grad=True)
        self.offset = offset if offset is not None else Tensor(np.zeros(2, dtype=dtype), requires_grad=True)

    def __call__(self, coords: np.ndarray) -> np.ndarray:
        return coords * self.scale.data.astype(np.float64) + self.offset.data.astype(np.float64)


def sinusoidal_encoding(coords: np.ndarray, n_freq: int = 2) -> np.ndarray:
    """Fixed sin/cos features of each coordinate axis (the plain PE baseline)."""
    feats = []
    for f in range(n_freq):
        ang = coords * (math.pi * 2**f)
        feats += [np.sin(ang), np.cos(ang)]
    return np.concatenate(feats, axis=1)


def encode_coords(coords: np.ndarray, mode: str, pce: PixelCoordEncoding | None = None) -> np.ndarray:
    if mode == "pce":
        return pce(coords) if pce is not None else np.asarray(coords, dtype=np.float64)
    if mode == "pe":
        return sinusoidal_encoding(coords)
    if mode == "none":
        return np.zeros((coords.shape[0], 1))
    raise ContractError(f"unknown position mode {mode!r}; expected one of {POSITION_MODES}")


# ---------------------------------------------------------------- index path


def _euclid_matrix(a: np.ndarray, block: int = 256) -> np.ndarray:
    n = a.shape[0]
    out = np.empty((n, n), dtype=np.float64)
    for s in range(0, n, block):
        diff = a[s : s + block, None, :] - a[None, :, :]
        out[s : s + block] = np.sqrt((diff * diff).sum(axis=-1))
    upper = np.triu(out, 1)
    return upper + upper.T


def dual_distance(ts: TokenSet, tau: float, symmetric_tau: bool = False, coords: np.ndarray | None = None) -> np.ndarray:
    """d_ij = ||x_i - x_j|| + (1 - tau) ||y_i - y_j||.

    With ``symmetric_tau`` the semantic term is weighted by tau as well.
    ``coords`` overrides ``ts.coords`` (e.g. after a coordinate encoding).
    """
    if not 0.0 <= tau <= 1.0:
        raise ContractError(f"tau must lie in [0, 1], got {tau}")
    x = np.asarray(ts.tokens.data, dtype=np.float64)
    y = np.asarray(ts.coords if coords is None else coords, dtype=np.float64)
    sem = _euclid_matrix(x)
    if tau == 1.0:
        return sem
    d = (tau * sem if symmetric_tau else sem) + (1.0 - tau) * _euclid_matrix(y)
    return d


def default_k(n: int, k: int = 5) -> int:
    return max(0, min(k, n - 1))


def local_density(d: np.ndarray, k: int) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    n = d.shape[0]
    if k >= n or k < 0 or (k == 0 and n > 1):
        raise ContractError(f"k must satisfy 1 <= k <= N-1 (N={n}), got {k}")
    if k == 0:
        return np.ones(n)
    masked = d.copy()
    np.fill_diagonal(masked, np.inf)
    nearest = np.argsort(masked, axis=1, kind="stable")[:, :k]
    knn = np.take_along_axis(d, nearest, axis=1)
    return np.exp(-(knn * knn).sum(axis=1) / k)


def separation_delta(d: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Distance to the nearest denser token; the densest token gets its
    largest distance.  Equal densities rank the lower index as denser."""
    d = np.asarray(d, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    n = d.shape[0]
    if rho.shape != (n,):
        raise DimensionError(f"separation_delta: density shape {rho.shape} vs distance {d.shape}")
    if n == 1:
        return np.zeros(1)
    idx = np.arange(n)
    denser = (rho[None, :] > rho[:, None]) | ((rho[None, :] == rho[:, None]) & (idx[None, :] < idx[:, None]))
    delta = np.where(denser, d, np.inf).min(axis=1)
    top = ~denser.any(axis=1)
    delta[top] = d[top].max(axis=1)
    return delta


def select_centers(score: np.ndarray, m: int) -> list[int]:
    score = np.asarray(score, dtype=np.float64)
    if m < 1 or m > score.shape[0]:
        raise ContractError(f"cannot select {m} centers from {score.shape[0]} tokens")
    order = np.argsort(-score, kind="stable")[:m]
    return sorted(int(i) for i in order)


def assign_clusters(d: np.ndarray, centers) -> np.ndarray:
    centers = np.asarray(centers, dtype=np.int64)
    if centers.size == 0:
        raise ContractError("assign_clusters: empty center list")
    d = np.asarray(d, dtype=np.float64)
    assignment = np.argmin(d[:, centers], axis=1)
    assignment[centers] = np.arange(centers.size)
    return assignment


# ---------------------------------------------------------------- differentiable path


def merge_tokens(tokens: Tensor, assignment, p: Tensor) -> Tensor:
    """Per-cluster softmax(p)-weighted mean of member tokens -> M×C."""
    tokens, p = T.as_tensor(tokens), T.as_tensor(p)
    a = np.asarray(assignment, dtype=np.int64)
    n = tokens.shape[0]
    if a.shape != (n,) or p.shape != (n,):
        raise DimensionError(f"merge_tokens: {n} tokens, assignment {a.shape}, p {p.shape}")
    m = int(a.max()) + 1
    counts = np.bincount(a, minlength=m)
    if np.any(counts == 0):
        raise ContractError(f"merge_tokens: empty cluster(s) {np.flatnonzero(counts == 0).tolist()}")
    cmax = np.full(m, -np.inf)
    np.maximum.at(cmax, a, p.data.astype(np.float64))
    w = T.exp(T.sub(p, cmax[a].astype(p.dtype)))
    w_col = T.reshape(w, (n, 1))
    num = T.segment_sum(T.mul(tokens, w_col), a, m)
    den = T.segment_sum(w_col, a, m)
    return T.div(num, den)


def importance_attention(q: Tensor, k: Tensor, v: Tensor, p: Tensor) -> Tensor:
    """softmax(q kᵀ / sqrt(d) + p) v with p added to every query's logit for key j."""
    q, k, v, p = (T.as_tensor(t) for t in (q, k, v, p))
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise DimensionError("importance_attention expects 2-D q, k, v")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0] or p.shape != (k.shape[0],):
        raise DimensionError(f"importance_attention: q {q.shape}, k {k.shape}, v {v.shape}, p {p.shape}")
    logits = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(q.shape[1]))
    return T.matmul(T.softmax_rows(T.add(logits, T.reshape(p, (1, -1)))), v)


@dataclass
class DownsampleParams:
    """Learnable pieces of one clustering downsampler.

    ``importance_w``/``importance_b`` map token features to the scalar p.
    The attention refinement is optional; without it the output tokens are
    the residual merge only.
    """

    importance_w: Tensor
    importance_b: Tensor
    q_w: Tensor | None = None
    q_b: Tensor | None = None
    k_w: Tensor | None = None
    v_w: Tensor | None = None
    v_b: Tensor | None = None
    skip_w: Tensor | None = None
    skip_b: Tensor | None = None

    @property
    def refines(self) -> bool:
        return self.q_w is not None


def cluster_downsample(
    ts: TokenSet,
    tau: float,
    k: int | None = None,
    ratio: float = 0.25,
    pce: PixelCoordEncoding | None = None,
    params: DownsampleParams | None = None,
    position: str = "pce",
    symmetric_tau: bool = False,
    m: int | None = None,
) -> tuple[TokenSet, ClusterResult]:
    """One clustering downsample step; ``m`` overrides the center count ceil(ratio·N)."""
    n = len(ts)
    if not 0.0 < ratio <= 1.0:
        raise ContractError(f"ratio must lie in (0, 1], got {ratio}")
    if m is None:
        m = math.ceil(ratio * n)
    k = default_k(n) if k is None else min(k, n - 1)

    y = encode_coords(ts.coords, position, pce)
    d = dual_distance(ts, tau, symmetric_tau=symmetric_tau, coords=y)
    rho = local_density(d, k)
    delta = separation_delta(d, rho)
    score = rho * delta
    centers = select_centers(score, m)
    assignment = assign_clusters(d, centers)

    x = ts.tokens
    if params is None:
        p = Tensor(ts.importance.astype(x.dtype))
    else:
        p = T.reshape(T.affine(x, params.importance_w, params.importance_b), (n,))
    merged = merge_tokens(x, assignment, p)
    out = T.add(merged, T.gather_rows(x, centers))
    if params is not None and params.refines:
        q = T.affine(out, params.q_w, params.q_b)
        kk = T.affine(x, params.k_w)
        v = T.affine(x, params.v_w, params.v_b)
        out = T.add(T.affine(out, params.skip_w, params.skip_b), importance_attention(q, kk, v, p))

    pw = np.exp(p.data.astype(np.float64) - p.data.max())
    den = np.bincount(assignment, weights=pw, minlength=m)
    coords = np.stack(
        [np.bincount(assignment, weights=pw * ts.coords[:, j], minlength=m) / den for j in range(2)], axis=1
    )
    result = ClusterResult(
        distance=d,
        density=rho,
        separation=delta,
        score=score,
        centers=centers,
        assignment=assignment,
        merged=merged,
        importance=p.data.astype(np.float64),
    )
    nxt = TokenSet(out, coords, p.data[centers].astype(np.float64), -(-ts.grid_h // 2), -(-ts.grid_w // 2))
    return nxt, result


# ---------------------------------------------------------------- reference twin


def brute_force_oracle(
    ts: TokenSet,
    tau: float,
    k: int,
    m: int,
    coords: np.ndarray | None = None,
    symmetric_tau: bool = False,
) -> ClusterResult:
    """Scalar-loop reimplementation of the clustering index path and the merge.

    Uses ``ts.importance`` as the merge weights.  Meant for N up to ~1000.
    """
    if not 0.0 <= tau <= 1.0:
        raise ContractError(f"tau must lie in [0, 1], got {tau}")
    x = np.asarray(ts.tokens.data, dtype=np.float64).tolist()
    y = np.asarray(ts.coords if coords is None else coords, dtype=np.float64).tolist()
    n = len(x)
    if n > 1024:
        raise ContractError("brute_force_oracle is limited to N <= 1024")
    if not 1 <= m <= n:
        raise ContractError(f"cannot select {m} centers from {n} tokens")
    if n > 1 and not 1 <= k <= n - 1:
        raise ContractError(f"k must satisfy 1 <= k <= N-1 (N={n}), got {k}")

    d = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            sem = math.dist(x[i], x[j])
            if symmetric_tau:
                sem = tau * sem
            dij = sem if tau == 1.0 else sem + (1.0 - tau) * math.dist(y[i], y[j])
            d[i][j] = d[j][i] = dij

    rho = []
    for i in range(n):
        near = sorted((d[i][j], j) for j in range(n) if j != i)[:k]
        s = 0.0
        for dist, _ in near:
            s += dist * dist
        rho.append(math.exp(-s / k) if k else 1.0)

    delta = []
    for i in range(n):
        best = math.inf
        for j in range(n):
            if j == i:
                continue
            if rho[j] > rho[i] or (rho[j] == rho[i] and j < i):
                best = min(best, d[i][j])
        if best == math.inf:
            best = max((d[i][j] for j in range(n) if j != i), default=0.0)
        delta.append(best)

    score = [rho[i] * delta[i] for i in range(n)]
    ranked = sorted(range(n), key=lambda i: (-score[i], i))
    centers = sorted(ranked[:m])

    assignment = []
    for i in range(n):
        if i in centers:
            assignment.append(centers.index(i))
            continue
        best_c, best_d = 0, math.inf
        for ci, c in enumerate(centers):
            if d[i][c] < best_d:
                best_c, best_d = ci, d[i][c]
        assignment.append(best_c)

    p = np.asarray(ts.importance, dtype=np.float64).tolist()
    width = len(x[0])
    merged = []
    for ci in range(m):
        members = [j for j in range(n) if assignment[j] == ci]
        top = max(p[j] for j in members)
        wsum = 0.0
        acc = [0.0] * width
        for j in members:
            wj = math.exp(p[j] - top)
            wsum += wj
            for c in range(width):
                acc[c] += wj * x[j][c]
        merged.append([a / wsum for a in acc])

    return ClusterResult(
        distance=np.array(d),
        density=np.array(rho),
        separation=np.array(delta),
        score=np.array(score),
        centers=centers,
        assignment=np.array(assignment, dtype=np.int64),
        merged=Tensor(np.array(merged)),
        importance=np.array(p),
    )
