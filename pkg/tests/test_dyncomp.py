import numpy as np
import pytest

import oracles
from gsdc import tensor as T
from gsdc.dyncomp import (DenseConfig, WindowSet, attention, fuse_dense, fuse_full, fuse_local,
                          gather_windows, init_dense_params, relative_position_bias,
                          relative_position_index, scatter_compensate, window_attention,
                          window_merge, window_partition)
from gsdc.gradcheck import check_gradients
from gsdc.supermask import CandidateSet


def cands(idx, scores=None):
    idx = np.asarray(idx, dtype=np.int64)
    return CandidateSet(idx, np.ones(len(idx)) if scores is None else np.asarray(scores, float))


def dense_params(cfg, D, seed=0, with_base=True):
    p = init_dense_params(np.random.default_rng(seed), D, cfg, with_base)
    return {f"dense.{k}": v for k, v in p.items()}


# --- windows ---------------------------------------------------------------


def test_partition_kappa_one_is_reshape():
    x = np.random.default_rng(0).normal(size=(3, 4, 2))
    np.testing.assert_array_equal(window_partition(x, 1).data, x.reshape(12, 1, 2))


def test_partition_merge_round_trip():
    x = np.random.default_rng(1).normal(size=(8, 12, 3))
    w = window_partition(x, 4)
    assert w.shape == (6, 16, 3)
    np.testing.assert_array_equal(window_merge(w, 8, 12, 4).data, x)


@pytest.mark.parametrize("y,x", [(0, 0), (3, 9), (7, 11), (5, 2)])
def test_partition_index_arithmetic(y, x):
    t = np.zeros((8, 12, 1))
    t[y, x] = 1
    w = window_partition(t, 4).data[..., 0]
    win, slot = oracles.window_of(y, x, 4, 12)
    assert list(zip(*np.nonzero(w))) == [(win, slot)]


def test_partition_indivisible():
    with pytest.raises(T.ShapeError):
        window_partition(np.zeros((6, 8, 1)), 4)


def test_relative_position_bias_depends_only_on_offset():
    k = 3
    table = np.random.default_rng(2).normal(size=((2 * k - 1) ** 2, 2))
    b = relative_position_bias(table, k).data
    assert b.shape == (2, 9, 9)
    coords = [(i // k, i % k) for i in range(k * k)]
    seen = {}
    for i in range(9):
        for j in range(9):
            off = (coords[i][0] - coords[j][0], coords[i][1] - coords[j][1])
            seen.setdefault(off, b[:, i, j])
            np.testing.assert_array_equal(b[:, i, j], seen[off])
    assert len(seen) == (2 * k - 1) ** 2
    assert len(np.unique(relative_position_index(k))) == (2 * k - 1) ** 2


# --- gather ----------------------------------------------------------------


def test_gather_neutral_annihilating_and_loop():
    rng = np.random.default_rng(3)
    q, k, v = (rng.normal(size=(6, 4, 2)) for _ in range(3))
    ws = gather_windows(q, k, v, cands([4, 1]))
    np.testing.assert_allclose(ws.k.data, k[[4, 1]].astype(np.float32))
    ws = gather_windows(q, k, v, cands([4, 1], [0.0, 0.7]))
    assert np.abs(ws.q.data[0]).max() == 0 and np.abs(ws.v.data[0]).max() == 0
    with T.Graph(wide=True):
        ws = gather_windows(T.Tensor(q), T.Tensor(k), T.Tensor(v), cands([5, 0, 2], [0.3, 0.9, 0.5]))
    for i, (w, s) in enumerate(zip([5, 0, 2], [0.3, 0.9, 0.5])):
        np.testing.assert_allclose(ws.q.data[i], q[w] * s, atol=1e-15)
        np.testing.assert_allclose(ws.v.data[i], v[w] * s, atol=1e-15)


def test_gather_out_of_range():
    with pytest.raises(IndexError):
        gather_windows(np.zeros((2, 4, 1)), np.zeros((2, 4, 1)), np.zeros((2, 4, 1)), cands([2]))


# --- attention -------------------------------------------------------------


def _proj(dv, rng):
    return {"dense.out.w": rng.normal(size=(dv, dv)), "dense.out.b": rng.normal(size=dv)}


def test_single_token_window_passes_values():
    rng = np.random.default_rng(4)
    q, k, v = (rng.normal(size=(3, 1, 4)) for _ in range(3))
    p = _proj(4, rng)
    with T.Graph(wide=True):
        out = window_attention(WindowSet(T.Tensor(q), T.Tensor(k), T.Tensor(v), None), None, p).data
    np.testing.assert_allclose(out, v @ p["dense.out.w"] + p["dense.out.b"], atol=1e-12)


def test_uniform_keys_give_uniform_attention():
    rng = np.random.default_rng(5)
    q, v = rng.normal(size=(1, 9, 4)), rng.normal(size=(1, 9, 4))
    k = np.tile(rng.normal(size=(1, 1, 4)), (1, 9, 1))
    with T.Graph(wide=True):
        out = attention(T.Tensor(q), T.Tensor(k), T.Tensor(v)).data
    np.testing.assert_allclose(out[0], np.tile(v[0].mean(0), (9, 1)), atol=1e-12)


@pytest.mark.parametrize("heads", [1, 2])
def test_window_attention_matches_dense_oracle(heads):
    rng = np.random.default_rng(6 + heads)
    n, kk, dv = 3, 4, 4
    q, k, v = (rng.normal(size=(n, kk * kk, dv)) for _ in range(3))
    table = rng.normal(size=((2 * kk - 1) ** 2, heads))
    p = _proj(dv, rng)
    with T.Graph(wide=True):
        bias = relative_position_bias(T.Tensor(table), kk)
        out = window_attention(WindowSet(T.Tensor(q), T.Tensor(k), T.Tensor(v), None), bias, p, heads).data
        b = bias.data
    dh = dv // heads
    for w in range(n):
        a = np.concatenate([oracles.attention(q[w, :, h * dh:(h + 1) * dh], k[w, :, h * dh:(h + 1) * dh],
                                              v[w, :, h * dh:(h + 1) * dh], b[h]) for h in range(heads)], 1)
        np.testing.assert_allclose(out[w], a @ p["dense.out.w"] + p["dense.out.b"], atol=1e-6)


def test_attention_gradients():
    rng = np.random.default_rng(8)
    arrs = [rng.normal(size=(2, 4, 4)) for _ in range(3)] + [rng.normal(size=(2, 4, 4))]
    assert check_gradients(lambda q, k, v, b: T.tsum(T.square(attention(q, k, v, 2, b))), arrs) < 1e-6


def test_attention_macs_scale_with_candidates_only():
    rng = np.random.default_rng(9)
    kk, dv = 4, 8
    for n in (1, 3):
        for total in (4, 16):
            q, k, v = (rng.normal(size=(total, kk * kk, dv)) for _ in range(3))
            ws = gather_windows(q, k, v, cands(range(n)))
            with T.count_macs() as c:
                attention(ws.q, ws.k, ws.v, heads=2)
            assert c["matmul"] == 2 * n * kk ** 4 * dv


# --- scatter ---------------------------------------------------------------


def test_scatter_cases():
    rng = np.random.default_rng(10)
    base = rng.normal(size=(8, 8, 2))
    np.testing.assert_array_equal(scatter_compensate(None, base, cands([]), 4).data, base)
    full = rng.normal(size=(4, 16, 2))
    out = scatter_compensate(full, base, cands([0, 1, 2, 3]), 4).data
    np.testing.assert_allclose(out, window_merge(full, 8, 8, 4).data)
    a = rng.normal(size=(2, 16, 2))
    with T.Graph(wide=True):
        out = scatter_compensate(T.Tensor(a), T.Tensor(base), cands([3, 1]), 4).data
    ow, bw = window_partition(out, 4).data, window_partition(base, 4).data
    for w in range(4):
        expect = {3: a[0], 1: a[1]}.get(w, bw[w])
        np.testing.assert_array_equal(ow[w], expect)


def test_scatter_permutation_equivariance():
    rng = np.random.default_rng(11)
    base = rng.normal(size=(8, 12, 3))
    a = rng.normal(size=(4, 16, 3))
    idx = np.array([5, 0, 3, 2])
    perm = np.array([2, 0, 3, 1])
    x = scatter_compensate(a, base, cands(idx), 4).data
    y = scatter_compensate(a[perm], base, cands(idx[perm]), 4).data
    assert x.tobytes() == y.tobytes()


def test_scatter_duplicate_indices_rejected():
    with pytest.raises(ValueError):
        scatter_compensate(np.zeros((2, 16, 1)), np.zeros((8, 8, 1)), cands([1, 1]), 4)


# --- branch ----------------------------------------------------------------

CFG = DenseConfig(kappa=4, d_v=4, mlp_hidden=6)


def _inputs(seed, H=32, W=32, D=3):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(H, W, D)), rng.normal(size=(H, W, D)), rng.normal(size=(H, W, 2 * D))


def test_fuse_dense_shape_and_no_candidate_limit():
    c_f0, c_t, adj = _inputs(0)
    p = dense_params(CFG, 3)
    assert fuse_dense(c_f0, c_t, adj, cands([1, 2], [0.9, 0.4]), CFG, p).shape == (32, 32, 3)
    a = fuse_dense(c_f0, c_t, adj, cands([]), CFG, p).data
    _, c_t2, adj2 = _inputs(1)
    b = fuse_dense(c_f0, c_t2, adj2, cands([]), CFG, p).data
    np.testing.assert_array_equal(a, b)


def test_locality_non_candidate_windows_do_not_leak():
    c_f0, c_t, adj = _inputs(2)
    p = dense_params(CFG, 3)
    cs = cands([0, 3], [0.8, 0.6])
    a = fuse_dense(c_f0, c_t, adj, cs, CFG, p).data
    adj2, c_t2 = adj.copy(), c_t.copy()
    adj2[0:16, 16:32] += 5.0  # window 1 at 4x tokens
    c_t2[16:32, 0:16] -= 3.0  # window 2
    b = fuse_dense(c_f0, c_t2, adj2, cs, CFG, p).data
    np.testing.assert_array_equal(a, b)
    adj2[0:16, 0:16] += 1.0  # a candidate window does change the output
    assert np.abs(fuse_dense(c_f0, c_t2, adj2, cs, CFG, p).data - a).max() > 1e-4


def test_gradient_reaches_only_candidate_windows():
    rng = np.random.default_rng(12)
    kk = 2
    q, k, v = (rng.normal(size=(2, kk * kk, 2)) for _ in range(3))
    base = rng.normal(size=(2, 4, 2))
    p = _proj(2, rng)
    cs = cands([1], [0.7])

    def loss(q_, k_, v_):
        ws = gather_windows(q_, k_, v_, cs)
        a = ws.q + window_attention(ws, None, p)
        return T.tsum(T.square(scatter_compensate(a, base, cs, kk)))

    with T.Graph(wide=True) as g:
        ts = [T.Tensor(x, requires_grad=True) for x in (q, k, v)]
        grads = T.backward(loss(*ts), g, inputs=ts)
    for gr in grads:
        assert np.abs(gr[0]).max() == 0
        assert np.abs(gr[1]).max() > 0
    assert check_gradients(loss, [q, k, v]) < 1e-6


def test_local_and_full_baselines_shapes():
    _, c_t, adj = _inputs(3)
    p = dense_params(CFG, 3, with_base=False)
    assert "dense.base.w" not in p
    assert fuse_local(c_t, adj, CFG, p).shape == (32, 32, 3)
    assert fuse_full(c_t, adj, CFG, p).shape == (32, 32, 3)


def test_local_equals_dense_with_every_window_and_unit_scores():
    c_f0, c_t, adj = _inputs(4)
    p = dense_params(CFG, 3)
    with T.Graph(wide=True):
        a = fuse_local(T.Tensor(c_t), T.Tensor(adj), CFG, p).data
        b = fuse_dense(T.Tensor(c_f0), T.Tensor(c_t), T.Tensor(adj), cands(range(4)), CFG, p).data
    np.testing.assert_allclose(a, b, atol=1e-12)
