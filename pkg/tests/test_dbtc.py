import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from efnet import dbtc
from efnet import tensor as T
from efnet.dbtc import TokenSet
from efnet.errors import ContractError, DimensionError
from efnet.tensor import Tensor


def tokset(x, y=None, p=None):
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    y = np.zeros((n, 2)) if y is None else np.asarray(y, dtype=np.float64)
    return TokenSet(x, y, np.zeros(n) if p is None else p, 1, n)


def random_ts(rng, n, c, shuffle=True):
    h = math.ceil(math.sqrt(n))
    w = math.ceil(n / h)
    coords = dbtc.grid_coords(h, w)[:n]
    if shuffle:
        coords = coords[rng.permutation(n)]
    return TokenSet(rng.standard_normal((n, c)), coords, rng.standard_normal(n), h, w)


# ---- dual_distance


def test_dual_distance_examples():
    ts = tokset([[1.0, 0.0], [0.0, 0.0]], [[0, 0], [0.3, 0.4]])
    # coords are scaled by 0.1 to stay in [0, 1]; the spatial norm is 0.5
    d = dbtc.dual_distance(ts, 0.5)
    assert d[0, 1] == pytest.approx(1 + 0.5 * 0.5)
    assert dbtc.dual_distance(ts, 1.0)[0, 1] == pytest.approx(1.0)
    same = tokset([[2.0, 3.0], [2.0, 3.0]], [[0.5, 0.5], [0.5, 0.5]])
    assert dbtc.dual_distance(same, 0.3)[0, 1] == 0.0


def test_dual_distance_direct_eval_unscaled_coords():
    ts = tokset([[1.0, 0.0], [0.0, 0.0]])
    d = dbtc.dual_distance(ts, 0.5, coords=np.array([[0.0, 0.0], [3.0, 4.0]]))
    assert d[0, 1] == pytest.approx(3.5)


def test_dual_distance_bad_tau():
    with pytest.raises(ContractError):
        dbtc.dual_distance(tokset([[0.0], [1.0]]), 1.5)


@given(st.integers(2, 30), st.integers(1, 6), st.integers(0, 10_000))
def test_dual_distance_metric_properties(n, c, seed):
    rng = np.random.default_rng(seed)
    ts = random_ts(rng, n, c)
    prev = None
    for tau in (0.0, 0.3, 0.7, 1.0):
        d = dbtc.dual_distance(ts, tau)
        assert np.array_equal(d, d.T)
        assert np.all(np.diag(d) == 0) and np.all(d >= 0)
        if prev is not None:
            assert np.all(d <= prev + 1e-12)
        prev = d
    for tau in (0.0, 1.0):
        d = dbtc.dual_distance(ts, tau)
        lhs = d[:, None, :]
        rhs = d[:, :, None] + d[None, :, :]
        assert np.all(lhs <= rhs + 1e-9)


def test_symmetric_tau_weights_semantic_term():
    ts = tokset([[1.0, 0.0], [0.0, 0.0]])
    y = np.array([[0.0, 0.0], [3.0, 4.0]])
    assert dbtc.dual_distance(ts, 0.5, symmetric_tau=True, coords=y)[0, 1] == pytest.approx(0.5 + 2.5)


# ---- density / separation / centers / assignment


def test_local_density_examples():
    d = np.zeros((3, 3))
    np.testing.assert_array_equal(dbtc.local_density(d, 2), 1.0)
    d = np.array([[0, 1, 1], [1, 0, 2], [1, 2, 0]], dtype=float)
    assert dbtc.local_density(d, 2)[0] == pytest.approx(math.exp(-1))
    with pytest.raises(ContractError):
        dbtc.local_density(d, 3)


def full_sort_density(d, k):
    n = d.shape[0]
    out = []
    for i in range(n):
        others = sorted((d[i, j], j) for j in range(n) if j != i)[:k]
        out.append(math.exp(-sum(v * v for v, _ in others) / k))
    return np.array(out)


def test_local_density_full_sort_oracle(rng):
    ts = random_ts(rng, 16, 3)
    d = dbtc.dual_distance(ts, 0.3)
    for k in (1, 3, 5, 15):
        # same neighbours; only the summation order differs, so allow one ulp
        np.testing.assert_allclose(dbtc.local_density(d, k), full_sort_density(d, k), rtol=1e-14, atol=0)


def test_separation_examples():
    d = np.array([[0, 1, 2], [1, 0, 1], [2, 1, 0]], dtype=float)
    np.testing.assert_array_equal(dbtc.separation_delta(d, np.array([0.9, 0.5, 0.2])), [2, 1, 1])
    np.testing.assert_array_equal(dbtc.separation_delta(np.zeros((1, 1)), np.array([1.0])), [0.0])


def scan_delta(d, rho):
    n = len(rho)
    out = np.zeros(n)
    for i in range(n):
        denser = [d[i, j] for j in range(n) if rho[j] > rho[i] or (rho[j] == rho[i] and j < i)]
        out[i] = min(denser) if denser else max((d[i, j] for j in range(n) if j != i), default=0.0)
    return out


def test_separation_scan_oracle(rng):
    ts = random_ts(rng, 32, 4)
    d = dbtc.dual_distance(ts, 0.7)
    rho = dbtc.local_density(d, 5)
    np.testing.assert_array_equal(dbtc.separation_delta(d, rho), scan_delta(d, rho))
    # equal densities exercise the index tie rule; exactly one token takes the max branch
    flat = np.full(32, 0.5)
    delta = dbtc.separation_delta(d, flat)
    np.testing.assert_array_equal(delta, scan_delta(d, flat))
    assert delta[0] == d[0].max()


@given(st.integers(2, 40), st.integers(0, 10_000), st.booleans())
def test_exactly_one_max_branch(n, seed, ties):
    rng = np.random.default_rng(seed)
    d = dbtc.dual_distance(random_ts(rng, n, 2), 0.5)
    rho = np.round(rng.random(n), 1) if ties else dbtc.local_density(d, min(3, n - 1))
    order = sorted(range(n), key=lambda i: (-rho[i], i))
    top = order[0]
    delta = dbtc.separation_delta(d, rho)
    assert delta[top] == d[top].max()
    for i in order[1:]:
        denser = [j for j in range(n) if rho[j] > rho[i] or (rho[j] == rho[i] and j < i)]
        assert delta[i] == min(d[i, j] for j in denser)


def test_select_centers_examples(rng):
    assert dbtc.select_centers(np.array([5.0, 1.0, 3.0]), 2) == [0, 2]
    assert dbtc.select_centers(np.ones(4), 2) == [0, 1]
    s = rng.random(50)
    for m in (1, 7, 50):
        assert dbtc.select_centers(s, m) == sorted(sorted(range(50), key=lambda i: (-s[i], i))[:m])
    with pytest.raises(ContractError):
        dbtc.select_centers(s, 51)


def test_assign_examples(rng):
    d = dbtc.dual_distance(random_ts(rng, 10, 2), 0.5)
    np.testing.assert_array_equal(dbtc.assign_clusters(d, [3]), 0)
    d = np.array([[0, 2, 1], [2, 0, 1], [1, 1, 0]], dtype=float)
    assert dbtc.assign_clusters(d, [0, 1]).tolist() == [0, 1, 0]


def test_assign_exhaustive_argmin(rng):
    d = dbtc.dual_distance(random_ts(rng, 64, 3), 0.3)
    centers = sorted(rng.choice(64, 16, replace=False).tolist())
    got = dbtc.assign_clusters(d, centers)
    for i in range(64):
        best = min(range(16), key=lambda c: (d[i, centers[c]], c))
        assert got[i] == (centers.index(i) if i in centers else best)


# ---- merge and attention


def test_merge_examples():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_allclose(dbtc.merge_tokens(x, [0, 0], Tensor([0.0, 0.0])).data, [[2, 3]])
    np.testing.assert_allclose(dbtc.merge_tokens(x, [0, 0], Tensor([math.log(3), 0.0])).data, [[1.5, 2.5]])
    np.testing.assert_array_equal(dbtc.merge_tokens(x, [1, 0], Tensor([4.0, -2.0])).data, [[3, 4], [1, 2]])
    with pytest.raises(ContractError):
        dbtc.merge_tokens(x, [0, 2], Tensor([0.0, 0.0]))


@given(st.integers(1, 30), st.integers(1, 5), st.integers(0, 10_000))
def test_merge_properties(n, c, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c))
    m = int(rng.integers(1, n + 1))
    a = np.concatenate([np.arange(m), rng.integers(0, m, n - m)])
    p = rng.standard_normal(n) * 3
    uni = dbtc.merge_tokens(Tensor(x), a, Tensor(np.zeros(n))).data
    for j in range(m):
        np.testing.assert_allclose(uni[j], x[a == j].mean(axis=0), atol=1e-6)
    out = dbtc.merge_tokens(Tensor(x), a, Tensor(p)).data
    for j in range(m):
        assert np.all(out[j] >= x[a == j].min(axis=0) - 1e-9) and np.all(out[j] <= x[a == j].max(axis=0) + 1e-9)
    shifted = dbtc.merge_tokens(Tensor(x), a, Tensor(p + 17.0)).data
    np.testing.assert_allclose(shifted, out, atol=1e-6)


def plain_attention(q, k, v):
    logits = q @ k.T / math.sqrt(q.shape[1])
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True)) @ v


def test_importance_attention_examples(rng):
    v = rng.standard_normal((1, 3))
    q = rng.standard_normal((1, 4))
    np.testing.assert_allclose(dbtc.importance_attention(Tensor(q), Tensor(q), Tensor(v), Tensor([0.7])).data, v)
    k = np.zeros((2, 2))
    out = dbtc.importance_attention(Tensor(np.ones((1, 2))), Tensor(k), Tensor([[4.0], [8.0]]), Tensor([math.log(3), 0.0]))
    assert out.data[0, 0] == pytest.approx(5.0)


@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 10_000))
def test_importance_attention_reductions(m, n, seed):
    rng = np.random.default_rng(seed)
    q, k, v = rng.standard_normal((m, 4)), rng.standard_normal((n, 4)), rng.standard_normal((n, 3))
    p = rng.standard_normal(n)
    base = dbtc.importance_attention(Tensor(q), Tensor(k), Tensor(v), Tensor(np.zeros(n))).data
    np.testing.assert_allclose(base, plain_attention(q, k, v), atol=1e-6)
    a = dbtc.importance_attention(Tensor(q), Tensor(k), Tensor(v), Tensor(p)).data
    b = dbtc.importance_attention(Tensor(q), Tensor(k), Tensor(v), Tensor(p - 5.0)).data
    np.testing.assert_allclose(a, b, atol=1e-6)


# ---- full step and oracle


def test_identical_tokens_single_cluster():
    f = Tensor(np.full((3, 2, 2), 1.5))
    out, res = dbtc.cluster_downsample(TokenSet.from_map(f), 0.3, ratio=0.25)
    assert res.centers == [0] and res.assignment.tolist() == [0, 0, 0, 0]
    np.testing.assert_allclose(out.tokens.data, [[3.0, 3.0, 3.0]])
    assert (out.grid_h, out.grid_w) == (1, 1)


def test_cluster_result_invariants(rng):
    f = Tensor(rng.standard_normal((4, 6, 6)))
    for tau in (0.3, 0.7, 1.0):
        out, res = dbtc.cluster_downsample(TokenSet.from_map(f), tau, k=5, ratio=0.25)
        assert len(out) == math.ceil(0.25 * 36)
        assert all(res.assignment[c] == j for j, c in enumerate(res.centers))
        assert set(res.assignment.tolist()) == set(range(res.n_clusters))
        assert np.all((res.density > 0) & (res.density <= 1))
        assert np.all((out.coords >= 0) & (out.coords <= 1))


def test_planted_blobs_match_oracle():
    from efnet.cli import planted_tokens

    ts = planted_tokens(64, 4, seed=3)
    out, res = dbtc.cluster_downsample(ts, 0.5, k=5, ratio=0.25, position="pce")
    ref = dbtc.brute_force_oracle(ts, 0.5, 5, 16)
    assert res.centers == ref.centers
    np.testing.assert_array_equal(res.assignment, ref.assignment)


@pytest.mark.parametrize("seed", range(0, 1000, 37))
def test_small_instances_agree_with_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    ts = random_ts(rng, n, int(rng.integers(1, 4)))
    k = int(rng.integers(1, n))
    m = int(rng.integers(1, n + 1))
    d = dbtc.dual_distance(ts, 0.5)
    rho = dbtc.local_density(d, k)
    centers = dbtc.select_centers(rho * dbtc.separation_delta(d, rho), m)
    ref = dbtc.brute_force_oracle(ts, 0.5, k, m)
    assert centers == ref.centers
    np.testing.assert_array_equal(dbtc.assign_clusters(d, centers), ref.assignment)


def test_tau_one_ignores_spatial_shuffle(rng):
    ts = random_ts(rng, 20, 3)
    shuffled = TokenSet(ts.tokens, ts.coords[rng.permutation(20)], ts.importance, ts.grid_h, ts.grid_w)
    a = dbtc.brute_force_oracle(ts, 1.0, 3, 5)
    b = dbtc.brute_force_oracle(shuffled, 1.0, 3, 5)
    assert a.centers == b.centers
    np.testing.assert_array_equal(a.assignment, b.assignment)
    c = dbtc.brute_force_oracle(shuffled, 0.0, 3, 5)
    assert not np.array_equal(c.distance, a.distance)


def test_oracle_boundary_k(rng):
    ts = random_ts(rng, 7, 2)
    ref = dbtc.brute_force_oracle(ts, 0.3, 6, 2)
    d = ref.distance
    expect = np.exp(-(d**2).sum(axis=1) / 6)
    np.testing.assert_allclose(ref.density, expect, rtol=1e-12)


def canonical(assignment, centers):
    # relabel clusters by their center's original index
    return [centers[a] for a in assignment]


def test_permutation_equivariance():
    rng = np.random.default_rng(5)
    n = 40
    ts = random_ts(rng, n, 3)
    perm = rng.permutation(n)
    pts = TokenSet(ts.tokens.data[perm], ts.coords[perm], ts.importance[perm], ts.grid_h, ts.grid_w)
    a = dbtc.brute_force_oracle(ts, 0.5, 4, 10)
    b = dbtc.brute_force_oracle(pts, 0.5, 4, 10)
    # continuous data has no ties, so centers and memberships coincide after mapping indices back
    assert sorted(perm[c] for c in b.centers) == a.centers
    back = np.empty(n, dtype=int)
    back[perm] = canonical(b.assignment, [int(perm[c]) for c in b.centers])
    assert back.tolist() == canonical(a.assignment, a.centers)


def test_tokenset_validation():
    with pytest.raises(DimensionError):
        TokenSet(np.ones((3, 2)), np.zeros((2, 2)), np.zeros(3), 1, 3)
    with pytest.raises(ContractError):
        TokenSet(np.ones((2, 2)), np.full((2, 2), 1.5), np.zeros(2), 1, 2)
    with pytest.raises(ContractError):
        TokenSet(np.ones((2, 2)), np.zeros((2, 2)), [np.inf, 0], 1, 2)


def test_position_modes_and_tau_schedule(rng):
    f = Tensor(rng.standard_normal((2, 4, 4)))
    for mode in ("none", "pe", "pce"):
        for tau in (0.3, 0.7, 1.0):
            out, _ = dbtc.cluster_downsample(TokenSet.from_map(f), tau, position=mode)
            assert len(out) == 4
    with pytest.raises(ContractError):
        dbtc.cluster_downsample(TokenSet.from_map(f), 0.3, position="xyz")
    with pytest.raises(ContractError):
        dbtc.cluster_downsample(TokenSet.from_map(f), 0.3, ratio=0.0)


def test_merge_gradient_flows():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 5.0], [0.0, 1.0]]), requires_grad=True)
    p = Tensor(np.array([0.1, -0.4, 0.3]), requires_grad=True)
    T.backward(T.sum(dbtc.merge_tokens(x, [0, 0, 1], p)))
    assert np.all(np.isfinite(x.grad)) and abs(p.grad[0]) > 0
