import math
from dataclasses import replace

import numpy as np
import pytest

from elasticdit import _kernels
from elasticdit.bench import (
    EvalSet,
    default_t_grid,
    eval_val_loss,
    flop_report,
    instrumented_macs,
    latency_bench,
    model_predictor,
    write_csv,
)
from elasticdit.checks import tiny_config
from elasticdit.elastic import ElasticTrainer, slice_parameters
from elasticdit.kdmd import AnalyticTeacher
from elasticdit.losses import sample_xt
from elasticdit.model import ModelConfig, StageLayout, init_params
from elasticdit.numerics import Rng
from elasticdit.oracle import GMMSpec, gmm_sample, irreducible_loss


def _layer(report, name):
    return next(c for c in report["layers"] if c.name == name)


@pytest.mark.parametrize("cfg", [tiny_config(), ModelConfig(), ModelConfig(layout=StageLayout(use_assa_outer=False))])
def test_flop_report_equals_instrumented_counter(cfg):
    for f in cfg.widths:
        rep = flop_report(cfg, f)
        counter = instrumented_macs(cfg, f)
        assert rep["total"] == counter.total
        assert rep["by_tag"]["attn"] == counter.by_tag.get("attn", 0)
        assert rep["by_tag"]["gate"] == counter.by_tag.get("gate", 0)


def _self_attention_macs(report, cfg, name, n):
    cross = 2 * cfg.cross_dim * n * cfg.cond_len
    return _layer(report, name).attn - cross


def test_assa_attention_ratio_at_reference_scale():
    cfg = ModelConfig.reference_large()
    dense_cfg = replace(cfg, layout=replace(cfg.layout, use_assa_outer=False))
    n = cfg.grid**2
    sparse = _self_attention_macs(flop_report(cfg), cfg, "down.0", n)
    dense = _self_attention_macs(flop_report(dense_cfg), dense_cfg, "down.0", n)
    assert n == 4096
    assert sparse / dense == 0.4375


def test_middle_stage_pairs_reduced_sixteenfold():
    cfg = ModelConfig(layout=StageLayout(use_assa_outer=False))
    rep = flop_report(cfg)
    n = cfg.grid**2
    outer = _self_attention_macs(rep, cfg, "up.0", n)
    middle = _self_attention_macs(rep, cfg, "mid.0", n // 4)
    assert outer == 16 * middle


def test_slice_both_projection_scales_quadratically():
    cfg = ModelConfig()
    full = _layer(flop_report(cfg, 1.0), "down.resample").proj
    half = _layer(flop_report(cfg, 0.5), "down.resample").proj
    assert half * 4 == full


def test_latency_bench_contract():
    with pytest.raises(ValueError):
        latency_bench(lambda: None, "noop", repeats=10)
    res = latency_bench(lambda: sum(range(1000)), "sum", 1000, repeats=30)
    assert res.q1_ms <= res.median_ms <= res.q3_ms and res.repeats == 30
    assert res.iqr_ms >= 0 and "node" in res.host
    row = res.row()
    assert row["name"] == "sum" and "iqr_ms" in row


def _bna_timer(n, b, r):
    rng = Rng(0)
    q, k, v = (rng.normal((1, 2, n, 16)) for _ in range(3))
    return lambda: _kernels.bna_forward(q, k, v, b, r, 0.25)


def test_bna_time_grows_with_neighbourhood():
    narrow = latency_bench(_bna_timer(2048, 16, 0), "r0", repeats=30).median_ms
    wide = latency_bench(_bna_timer(2048, 16, 7), "r7", repeats=30).median_ms
    assert narrow < wide


def test_latency_repeat_stability():
    fn = _bna_timer(2048, 16, 2)
    a = latency_bench(fn, "a", repeats=30).median_ms
    b = latency_bench(fn, "b", repeats=30).median_ms
    assert abs(a - b) / max(a, b) <= 0.2


def test_write_csv(tmp_path):
    path = tmp_path / "x.csv"
    write_csv(path, [{"a": 1, "b": 2.5}, {"a": 3, "b": 4.0}])
    assert path.read_text() == "a,b\n1,2.5\n3,4.0\n"


# --- validation-loss protocol ----------------------------------------------------


def test_eval_set_is_frozen_and_deterministic():
    x0 = gmm_sample(GMMSpec.default(), 64, Rng(0))
    a, b = EvalSet.create(x0, 5), EvalSet.create(x0, 5)
    assert a.eps.tobytes() == b.eps.tobytes() and np.array_equal(a.t, b.t)
    assert set(np.unique(a.t)) <= set(default_t_grid())
    with pytest.raises(ValueError):
        a.x0[0, 0, 0, 0] = 1.0
    pred = AnalyticTeacher(GMMSpec.default())
    assert eval_val_loss(pred, a) > 0.0
    assert eval_val_loss(pred, a) == eval_val_loss(pred, a)


def test_oracle_val_loss_matches_irreducible():
    spec = GMMSpec.default()
    x0 = gmm_sample(spec, 4000, Rng(1))
    teacher = AnalyticTeacher(spec)
    ev = EvalSet.create(x0, 2, cond=np.full(4000, teacher.null_label))
    oracle = eval_val_loss(teacher, ev)
    irr, se = irreducible_loss(spec, default_t_grid(), 200_000, Rng(3))
    # the eval set has 4000 tuples, so its own Monte-Carlo error dominates
    v = teacher(ev.x_t, ev.t)
    per = np.mean(((ev.eps - ev.x0) - v).reshape(len(ev), -1).astype(np.float64) ** 2, axis=1)
    se_eval = per.std(ddof=1) / math.sqrt(len(per))
    assert abs(oracle - irr) <= 3 * math.hypot(se, se_eval)


def test_training_lowers_val_loss():
    cfg = tiny_config()
    spec = GMMSpec.default(channels=cfg.in_channels, size=cfg.latent_size)
    data = gmm_sample(spec, 2000, Rng(4), dtype=np.float32)
    ev = EvalSet.create(gmm_sample(spec, 512, Rng(5)), 6, cond=np.full(512, cfg.num_classes))
    store = init_params(cfg, Rng(7))
    before = eval_val_loss(model_predictor(cfg, slice_parameters(store, cfg, 1.0)), ev)
    tr = ElasticTrainer(cfg, store, lr=2e-3, seed=8)
    rng = Rng(9)
    for step in range(150):
        idx = rng.integers(0, len(data), 32)
        batch = sample_xt(data[idx], rng.normal((32,) + data.shape[1:]), rng.uniform(0, 1, (32,)), np.full(32, cfg.num_classes))
        tr.step(batch)
    after = eval_val_loss(model_predictor(cfg, slice_parameters(store, cfg, 1.0)), ev)
    assert after < before
