import numpy as np
import pytest

from elasticdit import numerics as nx
from elasticdit.checks import tiny_config
from elasticdit.elastic import enumerate_parameter_count, parameter_count, slice_parameters
from elasticdit.model import (
    ModelConfig,
    StageLayout,
    as_tensors,
    dit_forward,
    init_params,
    patchify,
    stage_resample,
    token_ledger,
    transformer_block,
    unpatchify,
)
from elasticdit.numerics import Rng, ShapeError, Tape, Tensor


def _view(store, cfg, f=1.0):
    return as_tensors(slice_parameters(store, cfg, f))


# --- patchify / resampling ---------------------------------------------------


def test_patchify_reference_scale_token_count():
    out = patchify(np.zeros((1, 4, 128, 128), np.float32), 2)
    assert out.shape == (1, 16, 64, 64)
    assert out.shape[2] * out.shape[3] == 4096


def test_patchify_small_shape_and_inverse():
    x = Rng(0).normal((2, 4, 16, 16), dtype=np.float64)
    y = patchify(x, 2)
    assert y.shape == (2, 16, 8, 8)
    np.testing.assert_array_equal(unpatchify(y, 2).data, x)


def test_patchify_rejects_indivisible():
    with pytest.raises(ShapeError):
        patchify(np.zeros((1, 4, 15, 16)), 2)


def _space_to_depth_weights(c: int) -> np.ndarray:
    w = np.zeros((4 * c, c, 2, 2))
    for ch in range(c):
        for i in range(2):
            for j in range(2):
                w[ch * 4 + i * 2 + j, ch, i, j] = 1.0
    return w


def test_stage_resample_counts_and_identity_roundtrip():
    x = Rng(1).normal((1, 3, 8, 8), dtype=np.float64)
    w = _space_to_depth_weights(3)
    down = stage_resample(Tensor(x), "down", w, np.zeros(12))
    assert down.shape == (1, 12, 4, 4)
    up = stage_resample(down, "up", w, np.zeros(3))
    np.testing.assert_array_equal(up.data, x)
    big = stage_resample(Tensor(np.zeros((1, 2, 64, 64))), "down", np.zeros((2, 2, 2, 2)), np.zeros(2))
    assert big.shape[2] * big.shape[3] == 1024


def test_stage_resample_errors():
    with pytest.raises(ShapeError):
        stage_resample(Tensor(np.zeros((1, 2, 5, 4))), "down", np.zeros((2, 2, 2, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        stage_resample(Tensor(np.zeros((1, 2, 4, 4))), "sideways", np.zeros((2, 2, 2, 2)), np.zeros(2))


# --- layouts ----------------------------------------------------------------


def test_layout_invariants():
    with pytest.raises(ValueError):
        StageLayout(down_depth=3, up_depth=2)
    with pytest.raises(ValueError):
        StageLayout(middle_depth=4, skip_topology=((2, 1),))
    assert StageLayout(middle_depth=4).skip_topology == ((0, 3), (1, 2))


def test_from_total_depth_keeps_ratios():
    lay = StageLayout.from_total_depth(24, 64)
    assert (lay.down_depth, lay.middle_depth, lay.up_depth) == (7, 8, 9)
    assert lay.up_depth >= lay.down_depth and lay.depth == 24


def test_token_ledger():
    assert token_ledger(ModelConfig.reference_large()) == {"down": 4096, "middle": 1024, "up": 4096}
    assert token_ledger(ModelConfig(latent_size=16, patch_size=2)) == {"down": 64, "middle": 16, "up": 64}


# --- transformer block -------------------------------------------------------


def _block_inputs(cfg, seed):
    rng = Rng(seed)
    d = cfg.layout.hidden_width
    x = rng.normal((2, d, 4, 4), dtype=np.float64)
    mod = rng.normal((2, 6 * d), dtype=np.float64)
    ctx = rng.normal((2, cfg.cond_dim, cfg.cond_len), dtype=np.float64)
    return x, mod, ctx


def test_block_is_identity_at_init():
    cfg = tiny_config()
    with nx.precision("float64"):
        store = init_params(cfg, Rng(0))
    x, _, ctx = _block_inputs(cfg, 1)
    mod = np.zeros((2, 6 * cfg.layout.hidden_width))
    out = transformer_block(Tensor(x), Tensor(mod), Tensor(ctx), "assa", _view(store, cfg), "down.0", cfg.attention)
    np.testing.assert_array_equal(out.data, x)


def test_block_rejects_unknown_kind(tiny_cfg, tiny_store):
    x, mod, ctx = _block_inputs(tiny_cfg, 2)
    with pytest.raises(ValueError):
        transformer_block(Tensor(x), Tensor(mod), Tensor(ctx), "sparse", _view(tiny_store, tiny_cfg), "down.0", tiny_cfg.attention)


def test_block_gradient_matches_finite_differences(tiny_cfg, tiny_store):
    view = slice_parameters(tiny_store, tiny_cfg, 1.0)
    arrays = {k: np.array(v) for k, v in view.items() if k.startswith("down.0.")}
    x, mod, ctx = _block_inputs(tiny_cfg, 3)
    w = Rng(4).normal(x.shape, dtype=np.float64)

    def run(params):
        return transformer_block(Tensor(x), Tensor(mod), Tensor(ctx), "assa", params, "down.0", tiny_cfg.attention)

    leaves = {k: Tensor(a, name=k, requires_grad=True) for k, a in arrays.items()}
    with Tape() as tape:
        loss = nx.sum_(nx.mul(run(leaves), w))
    got = nx.backward(tape, loss, leaves)
    ref = nx.finite_diff_grad(lambda: float(np.sum(run(as_tensors(arrays)).data * w)), arrays)
    assert nx.rel_error(got, ref) <= 1e-6


# --- full forward --------------------------------------------------------------


def _inputs(cfg, seed, b=2):
    rng = Rng(seed)
    x = rng.normal((b, cfg.in_channels, cfg.latent_size, cfg.latent_size), dtype=np.float64)
    return x, rng.uniform(0, 1, (b,)), np.arange(b) % cfg.num_classes


@pytest.mark.parametrize("f", [0.375, 0.5, 1.0])
def test_output_shape_matches_input(f):
    cfg = ModelConfig(latent_size=8, patch_size=2, layout=StageLayout(hidden_width=32))
    store = init_params(cfg, Rng(0), random_all=True)
    x, t, c = _inputs(cfg, 5)
    assert dit_forward(_view(store, cfg, f), cfg, x.astype(np.float32), t, c, f).shape == x.shape


def test_forward_rejects_bad_width_and_shape(tiny_cfg, tiny_store):
    x, t, c = _inputs(tiny_cfg, 6)
    with pytest.raises(ValueError):
        dit_forward(_view(tiny_store, tiny_cfg), tiny_cfg, x, t, c, 0.75)
    with pytest.raises(ShapeError):
        dit_forward(_view(tiny_store, tiny_cfg), tiny_cfg, x[:, :1], t, c)
    with pytest.raises(ShapeError):
        dit_forward(_view(tiny_store, tiny_cfg, 0.5), tiny_cfg, x, t, c, 1.0)


def test_condition_token_order_matters(tiny_cfg, tiny_store):
    x, t, _ = _inputs(tiny_cfg, 7)
    tokens = Rng(8).normal((2, tiny_cfg.cond_len, tiny_cfg.cond_dim), dtype=np.float64)
    p = _view(tiny_store, tiny_cfg)
    a = dit_forward(p, tiny_cfg, x, t, tokens).data
    b = dit_forward(p, tiny_cfg, x, t, tokens[:, ::-1].copy()).data
    assert np.max(np.abs(a - b)) > 1e-6


def test_null_condition_ignores_other_class_rows(tiny_cfg, tiny_store):
    x, t, _ = _inputs(tiny_cfg, 9)
    null = np.full(2, tiny_cfg.num_classes)
    base = dit_forward(_view(tiny_store, tiny_cfg), tiny_cfg, x, t, null).data
    store2 = dict(tiny_store)
    table = tiny_store["cond.table"].copy()
    table[: tiny_cfg.num_classes] += 5.0
    store2["cond.table"] = table
    np.testing.assert_array_equal(dit_forward(_view(store2, tiny_cfg), tiny_cfg, x, t, null).data, base)
    table[tiny_cfg.num_classes] += 5.0
    assert not np.allclose(dit_forward(_view(store2, tiny_cfg), tiny_cfg, x, t, null).data, base)


@pytest.mark.parametrize("wire", ["skip0", "long_skip", "pos_embed"])
def test_ablating_wiring_changes_output(tiny_cfg, tiny_store, wire):
    x, t, c = _inputs(tiny_cfg, 10)
    p = _view(tiny_store, tiny_cfg)
    full = dit_forward(p, tiny_cfg, x, t, c).data
    cut = dit_forward(p, tiny_cfg, x, t, c, ablate=(wire,)).data
    assert np.max(np.abs(full - cut)) > 1e-8


def test_return_features_shape(tiny_cfg, tiny_store):
    x, t, c = _inputs(tiny_cfg, 11)
    out, feat = dit_forward(_view(tiny_store, tiny_cfg, 0.5), tiny_cfg, x, t, c, 0.5, return_features=True)
    assert out.shape == x.shape
    assert feat.shape == (2, tiny_cfg.width_at(0.5), 4, 4)


# --- parameter accounting ------------------------------------------------------


def test_toy_parameter_count_matches_enumeration():
    cfg = ModelConfig()
    assert (cfg.layout.down_depth, cfg.layout.middle_depth, cfg.layout.up_depth, cfg.layout.hidden_width) == (2, 4, 2, 64)
    for f in cfg.widths:
        assert parameter_count(cfg, f) == enumerate_parameter_count(cfg, f)
    sized = init_params(cfg.standalone(1.0), Rng(0))
    assert sum(a.size for a in sized.values()) == parameter_count(cfg, 1.0)


def test_reference_large_counts_near_targets():
    cfg = ModelConfig.reference_large()
    targets = {0.375: 0.3e9, 0.5: 0.4e9, 1.0: 1.6e9}
    for f, want in targets.items():
        got = parameter_count(cfg, f)
        assert got == enumerate_parameter_count(cfg, f)
        assert abs(got - want) / want <= 0.10, (f, got)


def test_config_roundtrip_and_validation():
    cfg = tiny_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        ModelConfig(widths=(0.5,))
    with pytest.raises(ShapeError):
        ModelConfig(latent_size=6, patch_size=2)
    with pytest.raises(ValueError):
        ModelConfig(layout=StageLayout(hidden_width=24), widths=(0.375, 1.0))
