import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elasticdit import _kernels
from elasticdit import numerics as nx
from elasticdit.attention import (
    AttentionConfig,
    adaptive_fuse,
    assa,
    attention_pair_count,
    bna,
    dense_attention,
    kv_compress,
    neighborhood_mask,
    self_attention,
    split_heads,
)
from elasticdit.numerics import Rng, ShapeError, Tape, Tensor


def naive_attention(q, k, v, mask=None):
    """Per-pair scalar loops; the reference for every attention path."""
    nq, d = q.shape
    out = np.zeros((nq, v.shape[1]))
    for i in range(nq):
        logits = [q[i] @ k[j] / math.sqrt(d) if mask is None or mask[i, j] else -np.inf for j in range(k.shape[0])]
        m = max(logits)
        w = np.array([math.exp(x - m) if x != -np.inf else 0.0 for x in logits])
        w /= w.sum()
        out[i] = w @ v
    return out


def layer_params(rng, d, heads, kv_heads, zero_gate=True, avg_compress=False):
    kv = kv_heads * d // heads
    p = {
        "l.q.w": rng.normal((d, d), 0.3), "l.q.b": rng.normal((d,), 0.1),
        "l.k.w": rng.normal((kv, d), 0.3), "l.k.b": rng.normal((kv,), 0.1),
        "l.v.w": rng.normal((kv, d), 0.3), "l.v.b": rng.normal((kv,), 0.1),
        "l.o.w": rng.normal((d, d), 0.3), "l.o.b": rng.normal((d,), 0.1),
        "l.kc.w": rng.normal((kv, kv, 2, 2), 0.3), "l.kc.b": rng.normal((kv,), 0.1),
        "l.vc.w": rng.normal((kv, kv, 2, 2), 0.3), "l.vc.b": rng.normal((kv,), 0.1),
        "l.gate.w": np.zeros((heads, d)) if zero_gate else rng.normal((heads, d), 0.5),
        "l.gate.b": np.zeros(heads) if zero_gate else rng.normal((heads,), 0.5),
    }
    if avg_compress:
        eye = np.eye(kv)[:, :, None, None] * np.full((1, 1, 2, 2), 0.25)
        p["l.kc.w"], p["l.vc.w"] = eye.copy(), eye.copy()
        p["l.kc.b"], p["l.vc.b"] = np.zeros(kv), np.zeros(kv)
    return {k: Tensor(np.asarray(v, dtype=np.float64)) for k, v in p.items()}


# --- masks -------------------------------------------------------------------


def test_clip_mask_small_example():
    m = neighborhood_mask(8, 4, 1, "clip").matrix
    assert m[0].nonzero()[0].tolist() == [0, 1, 2, 3]
    assert m[1].nonzero()[0].tolist() == [0, 1, 2, 3]
    assert m[4].nonzero()[0].tolist() == list(range(2, 8))
    assert m.sum() == 40


def test_shift_mask_keeps_window_width():
    m = neighborhood_mask(8, 4, 1, "shift").matrix
    assert m[0].nonzero()[0].tolist() == list(range(0, 6))
    assert m[4].nonzero()[0].tolist() == list(range(2, 8))
    assert (m.sum(axis=1) == 6).all()


def test_shift_mask_reference_scale_row_support():
    nb = 4096 // 16
    for blk in (0, 7, 15):
        lo, hi = _kernels.neighborhood_range(blk, 16, 1, nb, True)
        assert hi - lo == 768


@pytest.mark.parametrize("boundary", ["shift", "clip"])
def test_full_radius_mask_is_all_true(boundary):
    assert neighborhood_mask(16, 4, 3, boundary).matrix.all()
    assert neighborhood_mask(16, 4, 7, boundary).matrix.all()


def test_mask_rejects_indivisible_blocks():
    with pytest.raises(ShapeError):
        neighborhood_mask(10, 4, 1)


def test_mask_pgm_export(tmp_path):
    path = tmp_path / "m.pgm"
    neighborhood_mask(8, 4, 1, "clip").to_pgm(path)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n8 8\n255\n")
    body = np.frombuffer(raw[len(b"P5\n8 8\n255\n"):], np.uint8)
    assert (body == 255).sum() == 40


@pytest.mark.parametrize("boundary", ["shift", "clip"])
@pytest.mark.parametrize("n,b", [(16, 2), (16, 4), (64, 8), (256, 16)])
def test_local_pairs_equal_mask_count(n, b, boundary):
    for r in (0, 1, 2):
        cfg = AttentionConfig(block_count=b, radius=r, boundary=boundary)
        assert attention_pair_count(n, cfg).local_pairs == neighborhood_mask(n, b, r, boundary).true_count


def test_pair_count_reference_scale():
    pc = attention_pair_count(4096, AttentionConfig(block_count=16, radius=1))
    assert pc.local_pairs == 3_145_728
    assert pc.global_pairs == 4_194_304
    assert pc.ratio == 0.4375
    full = attention_pair_count(64, AttentionConfig(block_count=4, radius=3), compression=False)
    assert full.ratio == 1.0


# --- dense attention ---------------------------------------------------------


def test_dense_single_token_returns_value():
    rng = Rng(0)
    q, k, v = rng.normal((1, 4)), rng.normal((1, 4)), rng.normal((1, 3))
    np.testing.assert_array_equal(dense_attention(q, k, v).data, v)


def test_dense_identical_keys_average_values():
    rng = Rng(1)
    k = np.tile(rng.normal((1, 4), dtype=np.float64), (5, 1))
    v = rng.normal((5, 3), dtype=np.float64)
    out = dense_attention(rng.normal((2, 4), dtype=np.float64), k, v).data
    np.testing.assert_allclose(out, np.tile(v.mean(0), (2, 1)), atol=1e-14)


def test_dense_matches_naive_loops():
    rng = Rng(2)
    q, k, v = (rng.normal((8, 4), dtype=np.float64) for _ in range(3))
    mask = neighborhood_mask(8, 4, 1, "clip").matrix
    np.testing.assert_allclose(dense_attention(q, k, v).data, naive_attention(q, k, v), atol=1e-12)
    np.testing.assert_allclose(dense_attention(q, k, v, mask).data, naive_attention(q, k, v, mask), atol=1e-12)


def test_dense_rejects_empty_mask_row():
    mask = np.ones((4, 4), bool)
    mask[2] = False
    with pytest.raises(ShapeError):
        dense_attention(np.zeros((4, 2)), np.zeros((4, 2)), np.zeros((4, 2)), mask)


def test_dense_grouped_heads_share_kv():
    rng = Rng(3)
    q = rng.normal((1, 4, 6, 3), dtype=np.float64)
    k = rng.normal((1, 2, 6, 3), dtype=np.float64)
    v = rng.normal((1, 2, 6, 3), dtype=np.float64)
    out = dense_attention(q, k, v).data
    for h in range(4):
        ref = naive_attention(q[0, h], k[0, h // 2], v[0, h // 2])
        np.testing.assert_allclose(out[0, h], ref, atol=1e-12)


# --- blockwise neighborhood attention ---------------------------------------


@pytest.mark.parametrize("backend", ["numpy", "numba"])
@pytest.mark.parametrize("boundary", ["shift", "clip"])
def test_bna_equals_masked_dense(backend, boundary):
    if backend == "numba" and not _kernels.HAVE_NUMBA:
        pytest.skip("numba not installed")
    prev = _kernels.set_backend(backend)
    try:
        rng = Rng(4)
        q, k, v = (rng.normal((2, 4, 64, 8)) for _ in range(3))
        got = bna(q, k, v, 8, 1, boundary).data
        ref = dense_attention(q, k, v, neighborhood_mask(64, 8, 1, boundary)).data
        assert np.max(np.abs(got - ref)) <= 1e-5
    finally:
        _kernels.set_backend(prev)


def test_bna_full_radius_equals_unmasked_dense():
    rng = Rng(5)
    q, k, v = (rng.normal((1, 2, 32, 4)) for _ in range(3))
    assert np.max(np.abs(bna(q, k, v, 4, 3).data - dense_attention(q, k, v).data)) <= 1e-5


def test_bna_zero_radius_is_block_local():
    rng = Rng(6)
    q, k, v = (rng.normal((16, 4), dtype=np.float64) for _ in range(3))
    base = bna(q, k, v, 4, 0).data
    v2 = v.copy()
    v2[8:] += 10.0  # blocks 2 and 3
    moved = bna(q, k, v2, 4, 0).data
    np.testing.assert_array_equal(moved[:8], base[:8])
    assert not np.allclose(moved[8:], base[8:])


@settings(max_examples=20, deadline=None)
@given(
    st.sampled_from([(16, 2), (16, 4), (16, 8), (32, 4), (32, 16)]),
    st.integers(0, 3),
    st.sampled_from(["shift", "clip"]),
    st.sampled_from([(2, 2), (2, 1)]),
)
def test_bna_property_matches_dense(nb, r, boundary, heads):
    n, b = nb
    rng = Rng(n * 31 + b * 7 + r)
    q = rng.normal((1, heads[0], n, 4), dtype=np.float64)
    k = rng.normal((1, heads[1], n, 4), dtype=np.float64)
    v = rng.normal((1, heads[1], n, 4), dtype=np.float64)
    got = bna(q, k, v, b, r, boundary).data
    ref = dense_attention(q, k, v, neighborhood_mask(n, b, r, boundary)).data
    assert np.max(np.abs(got - ref)) <= 1e-12


@pytest.mark.parametrize("boundary", ["shift", "clip"])
def test_bna_gradient_matches_finite_differences(boundary):
    rng = Rng(7)
    arrays = {n: rng.normal((1, 2, 8, 3), dtype=np.float64) for n in "qkv"}
    w = rng.normal((1, 2, 8, 3), dtype=np.float64)
    leaves = {n: Tensor(a, name=n, requires_grad=True) for n, a in arrays.items()}
    with Tape() as tape:
        loss = nx.sum_(nx.mul(bna(leaves["q"], leaves["k"], leaves["v"], 4, 1, boundary), w))
    got = nx.backward(tape, loss, leaves)
    ref = nx.finite_diff_grad(lambda: float(np.sum(bna(arrays["q"], arrays["k"], arrays["v"], 4, 1, boundary).data * w)), arrays)
    assert nx.rel_error(got, ref) <= 1e-7


# --- compression, fusion, full layer -----------------------------------------


def test_kv_compress_shapes_and_constants():
    kv = 4
    eye = np.eye(kv)[:, :, None, None] * np.full((1, 1, 2, 2), 0.25)
    params = {"l.kc.w": Tensor(eye), "l.kc.b": Tensor(np.zeros(kv)), "l.vc.w": Tensor(eye), "l.vc.b": Tensor(np.zeros(kv))}
    k = Tensor(np.full((1, kv, 8, 8), 3.0))
    kc, vc = kv_compress(k, k, params, "l")
    assert kc.shape == (1, kv, 4, 4)
    np.testing.assert_allclose(kc.data, 3.0)
    with pytest.raises(ShapeError):
        kv_compress(Tensor(np.zeros((1, kv, 5, 4))), k, params, "l")


def test_kv_compress_matches_sliding_window():
    rng = Rng(8)
    k = rng.normal((1, 2, 4, 4), dtype=np.float64)
    w = rng.normal((2, 2, 2, 2), dtype=np.float64)
    b = rng.normal((2,), dtype=np.float64)
    params = {"l.kc.w": Tensor(w), "l.kc.b": Tensor(b), "l.vc.w": Tensor(w), "l.vc.b": Tensor(b)}
    kc, _ = kv_compress(Tensor(k), Tensor(k), params, "l")
    for o in range(2):
        for i in range(2):
            for j in range(2):
                ref = b[o] + np.sum(w[o] * k[0, :, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2])
                assert abs(kc.data[0, o, i, j] - ref) <= 1e-6


def test_adaptive_fuse_zero_gate_averages():
    rng = Rng(9)
    g, l = Tensor(rng.normal((2, 4, 16, 3))), Tensor(rng.normal((2, 4, 16, 3)))
    hidden = Tensor(rng.normal((2, 12, 4, 4)))
    out = adaptive_fuse(g, l, hidden, Tensor(np.zeros((4, 12), np.float32)), Tensor(np.zeros(4, np.float32)))
    np.testing.assert_allclose(out.data, 0.5 * (g.data + l.data), atol=1e-6)


def test_adaptive_fuse_saturated_gate_selects_global():
    rng = Rng(10)
    g, l = Tensor(rng.normal((1, 2, 4, 3), dtype=np.float64)), Tensor(rng.normal((1, 2, 4, 3), dtype=np.float64))
    hidden = Tensor(np.ones((1, 6, 2, 2)))
    out = adaptive_fuse(g, l, hidden, Tensor(np.zeros((2, 6))), Tensor(np.full(2, 800.0)))
    np.testing.assert_allclose(out.data, g.data, rtol=0, atol=1e-15)


def test_adaptive_fuse_matches_scalar_formula_and_is_bounded():
    rng = Rng(11)
    g, l = rng.normal((2, 3, 4, 2), dtype=np.float64), rng.normal((2, 3, 4, 2), dtype=np.float64)
    hid = rng.normal((2, 5, 2, 2), dtype=np.float64)
    gw, gb = rng.normal((3, 5), dtype=np.float64), rng.normal((3,), dtype=np.float64)
    out = adaptive_fuse(Tensor(g), Tensor(l), Tensor(hid), Tensor(gw), Tensor(gb)).data
    for bi in range(2):
        pooled = hid[bi].mean(axis=(1, 2))
        for h in range(3):
            gate = 1.0 / (1.0 + math.exp(-(gw[h] @ pooled + gb[h])))
            np.testing.assert_allclose(out[bi, h], gate * g[bi, h] + (1 - gate) * l[bi, h], atol=1e-12)
    lo, hi = np.minimum(g, l), np.maximum(g, l)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


def test_adaptive_fuse_shape_mismatch():
    with pytest.raises(ShapeError):
        adaptive_fuse(Tensor(np.zeros((1, 2, 4, 3))), Tensor(np.zeros((1, 2, 4, 2))), Tensor(np.zeros((1, 4, 2, 2))),
                      Tensor(np.zeros((2, 4))), Tensor(np.zeros(2)))


def test_assa_reduces_to_dense_when_local_branch_is_full():
    cfg = AttentionConfig(query_heads=2, kv_heads=2, block_count=4, radius=3)
    rng = Rng(12)
    params = layer_params(rng, 8, 2, 2)
    params["l.gate.b"] = Tensor(np.full(2, -800.0))  # gate -> 0: local branch only
    hidden = Tensor(rng.normal((1, 8, 4, 4), dtype=np.float64))
    np.testing.assert_allclose(assa(hidden, cfg, params, "l").data, self_attention(hidden, cfg, params, "l").data, atol=1e-10)


def test_assa_zero_hidden_is_finite():
    cfg = AttentionConfig(query_heads=2, kv_heads=2, block_count=4, radius=1)
    params = layer_params(Rng(13), 8, 2, 2)
    params = {k: Tensor(np.zeros_like(v.data)) if k.endswith(".b") else v for k, v in params.items()}
    out = assa(Tensor(np.zeros((1, 8, 4, 4))), cfg, params, "l").data
    assert np.all(np.isfinite(out)) and np.allclose(out, 0.0)


def test_assa_matches_composition_of_oracles():
    cfg = AttentionConfig(query_heads=2, kv_heads=1, block_count=4, radius=1, boundary="clip")
    rng = Rng(14)
    d = 8
    params = layer_params(rng, d, 2, 1, zero_gate=False)
    x = rng.normal((1, d, 4, 4), dtype=np.float64)
    p = {k: v.data for k, v in params.items()}
    tok = x[0].reshape(d, 16).T  # (N, d)
    q = tok @ p["l.q.w"].T + p["l.q.b"]
    k = tok @ p["l.k.w"].T + p["l.k.b"]
    v = tok @ p["l.v.w"].T + p["l.v.b"]
    kgrid = k.T.reshape(1, 4, 4, 4)
    vgrid = v.T.reshape(1, 4, 4, 4)

    def conv(g, w, b):
        out = np.zeros((4, 2, 2))
        for o in range(4):
            for i in range(2):
                for j in range(2):
                    out[o, i, j] = b[o] + np.sum(w[o] * g[0, :, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2])
        return out.reshape(4, 4).T

    kc, vc = conv(kgrid, p["l.kc.w"], p["l.kc.b"]), conv(vgrid, p["l.vc.w"], p["l.vc.b"])
    mask = neighborhood_mask(16, 4, 1, "clip").matrix
    pooled = x[0].mean(axis=(1, 2))
    heads = []
    for h in range(2):
        qh = q[:, 4 * h : 4 * h + 4]
        glob = naive_attention(qh, kc, vc)
        loc = naive_attention(qh, k, v, mask)
        g = 1.0 / (1.0 + math.exp(-(p["l.gate.w"][h] @ pooled + p["l.gate.b"][h])))
        heads.append(g * glob + (1 - g) * loc)
    fused = np.concatenate(heads, axis=1)
    ref = fused @ p["l.o.w"].T + p["l.o.b"]
    got = assa(Tensor(x), cfg, params, "l").data[0].reshape(d, 16).T
    assert np.max(np.abs(got - ref)) <= 1e-5


def test_assa_gradient_matches_finite_differences():
    cfg = AttentionConfig(query_heads=2, kv_heads=2, block_count=4, radius=1)
    rng = Rng(15)
    params = layer_params(rng, 4, 2, 2, zero_gate=False)
    arrays = {k: v.data for k, v in params.items()}
    x = rng.normal((1, 4, 4, 4), dtype=np.float64)
    w = rng.normal((1, 4, 4, 4), dtype=np.float64)
    leaves = {k: Tensor(a, name=k, requires_grad=True) for k, a in arrays.items()}
    with Tape() as tape:
        loss = nx.sum_(nx.mul(assa(Tensor(x), cfg, leaves, "l"), w))
    got = nx.backward(tape, loss, leaves)
    ref = nx.finite_diff_grad(lambda: float(np.sum(assa(Tensor(x), cfg, {k: Tensor(a) for k, a in arrays.items()}, "l").data * w)), arrays)
    assert nx.rel_error(got, ref) <= 1e-6


def test_split_heads_rejects_indivisible():
    with pytest.raises(ShapeError):
        split_heads(Tensor(np.zeros((1, 6, 2, 2))), 4)


def test_attention_config_validation():
    with pytest.raises(ValueError):
        AttentionConfig(query_heads=4, kv_heads=3)
    with pytest.raises(ValueError):
        AttentionConfig(boundary="wrap")
    AttentionConfig(query_heads=16, kv_heads=8)
    AttentionConfig(query_heads=4, kv_heads=1)
