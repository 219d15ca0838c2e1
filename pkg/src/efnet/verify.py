"""Self-verification suites behind ``efnet verify``."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import dbtc, mfad, mif
from . import tensor as T
from .tensor import Tensor, grad_check
from .train import cross_entropy

TAUS = (0.0, 0.3, 0.5, 0.7, 1.0)
KS = (1, 3, 5)
REAL_TOL = 1e-10
GRAD_TOL = 1e-4


@dataclass
class SuiteResult:
    name: str
    total: int = 0
    failed: int = 0
    max_error: float = 0.0
    notes: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.failed == 0 and self.total > 0

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        return f"[{status}] {self.name:<14} {self.total - self.failed}/{self.total} passed, max error {self.max_error:.3e}"


# ---------------------------------------------------------------- clustering


def random_instance(rng: np.random.Generator, n_range=(2, 256), c_range=(1, 16)):
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    c = int(rng.integers(c_range[0], c_range[1] + 1))
    tau = float(rng.choice(TAUS))
    k = min(int(rng.choice(KS)), n - 1)
    m = int(rng.integers(1, n + 1))
    h = int(math.ceil(math.sqrt(n)))
    w = int(math.ceil(n / h))
    coords = dbtc.grid_coords(h, w)[:n]
    coords = coords[rng.permutation(n)]
    ts = dbtc.TokenSet(rng.standard_normal((n, c)), coords, rng.standard_normal(n), h, w)
    return ts, tau, k, m


def compare_with_oracle(ts: dbtc.TokenSet, tau: float, k: int, m: int) -> tuple[bool, float, str]:
    """Run the vectorized path and the scalar oracle; return (indices equal, max real error, note)."""
    d = dbtc.dual_distance(ts, tau)
    rho = dbtc.local_density(d, k)
    delta = dbtc.separation_delta(d, rho)
    centers = dbtc.select_centers(rho * delta, m)
    assignment = dbtc.assign_clusters(d, centers)
    merged = dbtc.merge_tokens(ts.tokens, assignment, Tensor(ts.importance))
    ref = dbtc.brute_force_oracle(ts, tau, k, m)
    same = centers == ref.centers and np.array_equal(assignment, ref.assignment)
    err = max(
        float(np.max(np.abs(d - ref.distance))),
        float(np.max(np.abs(rho - ref.density))),
        float(np.max(np.abs(delta - ref.separation))),
        float(np.max(np.abs(merged.data - ref.merged.data))) if same else 0.0,
    )
    note = "" if same else f"N={len(ts)} tau={tau} k={k} m={m}: index outputs differ"
    return same, err, note


def clustering_suite(instances: int = 200, seed: int = 0, n_range=(2, 256)) -> SuiteResult:
    rng = np.random.default_rng(seed)
    res = SuiteResult("clustering")
    for _ in range(instances):
        ts, tau, k, m = random_instance(rng, n_range)
        same, err, note = compare_with_oracle(ts, tau, k, m)
        res.total += 1
        res.max_error = max(res.max_error, err)
        if not same or err > REAL_TOL:
            res.failed += 1
            res.notes.append(note or f"N={len(ts)}: real error {err:.2e}")
    return res


# ---------------------------------------------------------------- gradients


def _scalarize(out: Tensor, weights: np.ndarray) -> Tensor:
    return T.sum(T.mul(out, weights))


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin * 2, x)


def grad_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """name -> (scalar function of float64 tensors, inputs) for every differentiable op."""
    r = rng.standard_normal
    W34 = r((3, 4))
    cases: dict[str, tuple[Callable, list[np.ndarray]]] = {
        "add": (lambda a, b: _scalarize(T.add(a, b), W34), [r((3, 4)), r((3, 4))]),
        "add_bcast": (lambda a, b: _scalarize(T.add(a, b), W34), [r((3, 4)), r((4,))]),
        "sub": (lambda a, b: _scalarize(T.sub(a, b), W34), [r((3, 4)), r((3, 4))]),
        "mul": (lambda a, b: _scalarize(T.mul(a, b), W34), [r((3, 4)), r((3, 4))]),
        "div": (lambda a, b: _scalarize(T.div(a, b), W34), [r((3, 4)), 1.5 + rng.random((3, 4))]),
        "scale": (lambda a: _scalarize(T.scale(a, -2.5), W34), [r((3, 4))]),
        "exp": (lambda a: _scalarize(T.exp(a), W34), [r((3, 4))]),
        "log": (lambda a: _scalarize(T.log(a), W34), [0.5 + rng.random((3, 4))]),
        "sigmoid": (lambda a: _scalarize(T.sigmoid(a), W34), [r((3, 4))]),
        "relu": (lambda a: _scalarize(T.relu(a), W34), [_away_from_zero(rng, (3, 4))]),
        "gelu": (lambda a: _scalarize(T.gelu(a), W34), [r((3, 4))]),
        "clamp_min": (lambda a: _scalarize(T.clamp_min(a, 0.0), W34), [_away_from_zero(rng, (3, 4))]),
        "sum": (lambda a, w=r((3,)): T.sum(T.mul(T.sum(a, axis=1), w)), [r((3, 4))]),
        "mean": (lambda a: T.mean(T.mul(a, a)), [r((3, 4))]),
        "matmul": (lambda a, b, w=r((3, 5)): _scalarize(T.matmul(a, b), w), [r((3, 4)), r((4, 5))]),
        "matmul_batched": (
            lambda a, b, w=r((2, 3, 2)): _scalarize(T.matmul(a, b), w),
            [r((2, 3, 4)), r((2, 4, 2))],
        ),
        "affine": (
            lambda x, wt, b, w=r((3, 2)): _scalarize(T.affine(x, wt, b), w),
            [r((3, 4)), r((4, 2)), r((2,))],
        ),
        "transpose": (lambda a: _scalarize(T.transpose(a), W34.T), [r((3, 4))]),
        "reshape": (lambda a: _scalarize(T.reshape(a, (4, 3)), W34.reshape(4, 3)), [r((3, 4))]),
        "concat": (
            lambda a, b, w=r((5, 4)): _scalarize(T.concat([a, b], axis=0), w),
            [r((3, 4)), r((2, 4))],
        ),
        "pad_crop": (
            lambda a, w=r((2, 4, 4)): _scalarize(T.crop2d(T.pad2d(a, 2, 1), 4, 4), w),
            [r((2, 3, 4))],
        ),
        "gather_rows": (lambda a, w=r((4, 4)): _scalarize(T.gather_rows(a, [2, 0, 2, 1]), w), [r((3, 4))]),
        "segment_sum": (
            lambda a, w=r((2, 4)): _scalarize(T.segment_sum(a, [1, 0, 1], 2), w),
            [r((3, 4))],
        ),
        "softmax_rows": (lambda a: _scalarize(T.softmax_rows(a), W34), [r((3, 4))]),
        "layer_norm": (
            lambda x, g, b: _scalarize(T.layer_norm(x, g, b), W34),
            [r((3, 4)), r((4,)), r((4,))],
        ),
        "channel_stats": (lambda f, w=r((3, 3)): _scalarize(T.channel_stats(f), w), [r((3, 4, 4))]),
        "upsample": (
            lambda f, w=r((2, 5, 7)): _scalarize(T.upsample_bilinear(f, 5, 7), w),
            [r((2, 3, 4))],
        ),
        "upsample_center": (
            lambda f, w=r((2, 6, 8)): _scalarize(T.upsample_bilinear(f, 6, 8, align_corners=False), w),
            [r((2, 3, 4))],
        ),
        "mean_pool2x2": (lambda f, w=r((2, 2, 3)): _scalarize(T.mean_pool2x2(f), w), [r((2, 3, 5))]),
        "pairwise_dist": (
            lambda a, b, w=r((3, 4)): _scalarize(T.pairwise_distance(a, b), w),
            [r((3, 4)), r((4, 4))],
        ),
    }

    assignment = [0, 1, 0, 2, 1, 2]
    w_merge = r((3, 4))
    cases["merge_tokens"] = (
        lambda x, p: _scalarize(dbtc.merge_tokens(x, assignment, p), w_merge),
        [r((6, 4)), r((6,))],
    )
    w_att = r((2, 3))
    cases["importance_attention"] = (
        lambda q, k, v, p: _scalarize(dbtc.importance_attention(q, k, v, p), w_att),
        [r((2, 4)), r((5, 4)), r((5, 3)), r((5,))],
    )
    gate = mif.ChannelGate(*(Tensor(r(s)) for s in ((9, 1), (1,), (1, 3), (3,))))
    w_mif = r((3, 5, 6))
    cases["mif_fuse"] = (
        lambda a, b: _scalarize(mif.mif_fuse(a, b, 4, gate), w_mif),
        [r((3, 5, 6)), r((3, 5, 6))],
    )
    labels = rng.integers(0, 3, size=(3, 4))
    labels[0, 0] = 255
    cases["decoder_ce"] = (
        lambda xf, ct: cross_entropy(mfad.predict(mfad.class_distance(xf, ct)), labels),
        [r((5, 3, 4)), r((3, 5))],
    )
    return cases


def gradient_suite(seeds: int = 3, step: float = 1e-5, first_seed: int = 0) -> SuiteResult:
    res = SuiteResult("gradients")
    for seed in range(first_seed, first_seed + seeds):
        for name, (fn, inputs) in grad_cases(np.random.default_rng(seed)).items():
            err = grad_check(fn, inputs, step)
            res.total += 1
            res.max_error = max(res.max_error, err)
            if not err < GRAD_TOL:
                res.failed += 1
                res.notes.append(f"{name} seed {seed}: {err:.2e}")
    return res


# ---------------------------------------------------------------- structure


def window_suite(seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    res = SuiteResult("windows")
    for c, h, w, win in [(1, 4, 4, 2), (3, 5, 5, 4), (2, 8, 6, 3), (4, 7, 9, 2), (2, 6, 6, 6), (1, 1, 1, 1)]:
        f = rng.standard_normal((c, h, w))
        back = mif.window_merge(mif.window_partition(Tensor(f), win)).data
        res.total += 1
        if not np.array_equal(back, f):
            res.failed += 1
            res.notes.append(f"{c}×{h}×{w} w={win} round trip differs")
    return res


def decoder_suite(instances: int = 100, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    res = SuiteResult("decoder")
    for _ in range(instances):
        k, c, h, w = int(rng.integers(2, 7)), int(rng.integers(1, 9)), int(rng.integers(1, 6)), int(rng.integers(1, 6))
        d = mfad.class_distance(Tensor(rng.standard_normal((c, h, w))), Tensor(rng.standard_normal((k, c))))
        pred = mfad.predict(d)
        res.total += 1
        colsum = pred.probs.data.sum(axis=0)
        res.max_error = max(res.max_error, float(np.max(np.abs(colsum - 1.0))))
        if not np.array_equal(pred.probs.data.argmax(axis=0), d.data.argmin(axis=0)) or res.max_error > 1e-6:
            res.failed += 1
    return res


def mif_symmetry_suite(instances: int = 10, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    res = SuiteResult("mif-symmetry")
    for _ in range(instances):
        c, h, w = int(rng.integers(1, 6)), int(rng.integers(2, 10)), int(rng.integers(2, 10))
        gate = mif.ChannelGate.init(c, rng, np.float64)
        gate.w2.data[:] = rng.standard_normal(gate.w2.shape)
        a, b = Tensor(rng.standard_normal((c, h, w))), Tensor(rng.standard_normal((c, h, w)))
        win = int(rng.integers(1, 5))
        res.total += 1
        if not np.array_equal(mif.mif_fuse(a, b, win, gate).data, mif.mif_fuse(b, a, win, gate).data):
            res.failed += 1
    return res


def run_all(instances: int = 200, grad_seeds: int = 3, seed: int = 0) -> list[SuiteResult]:
    return [
        clustering_suite(instances, seed),
        gradient_suite(grad_seeds),
        window_suite(seed),
        decoder_suite(100, seed),
        mif_symmetry_suite(10, seed),
    ]


def format_report(results: list[SuiteResult]) -> str:
    lines = [r.line() for r in results]
    for r in results:
        lines += [f"    {r.name}: {n}" for n in r.notes[:10]]
    ok = all(r.ok for r in results)
    lines.append("verify: " + ("all suites passed" if ok else "FAILURES"))
    return "\n".join(lines)
