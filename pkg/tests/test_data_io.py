import json
import math
import struct

import numpy as np
import pytest

from elasticdit.checks import tiny_config
from elasticdit.data_io import (
    ALIGN,
    METRICS_FIELDS,
    CheckpointError,
    MetricsWriter,
    SyntheticImageSpec,
    gen_dataset,
    load_checkpoint,
    load_model,
    metrics_append,
    read_metrics,
    save_checkpoint,
    save_model,
)
from elasticdit.model import init_params
from elasticdit.numerics import Rng


@pytest.fixture
def model_file(tmp_path):
    cfg = tiny_config()
    store = init_params(cfg, Rng(0), random_all=True)
    path = save_model(tmp_path / "m.esdt", cfg, store, seed=17, extra={"step": 3})
    return path, cfg, store


def test_model_roundtrip_is_bit_exact(model_file):
    path, cfg, store = model_file
    cfg2, store2, state, meta = load_model(path)
    assert cfg2 == cfg and meta["seed"] == 17 and meta["step"] == 3
    assert meta["widths"] == list(cfg.widths) and meta["layout"]["hidden_width"] == 16
    assert set(store2) == set(store) and state == {}
    for k in store:
        assert store2[k].dtype == np.float32
        assert store2[k].tobytes() == store[k].tobytes()


def test_state_arrays_roundtrip(tmp_path, model_file):
    _, cfg, store = model_file
    aux = {"adam.m.x": np.arange(5, dtype=np.float32)}
    path = save_model(tmp_path / "s.esdt", cfg, store, 0, state=aux)
    _, _, state, _ = load_model(path)
    np.testing.assert_array_equal(state["adam.m.x"], aux["adam.m.x"])


def test_layout_matches_independent_size_ledger(tmp_path):
    tensors = {"b": np.ones((3, 5), np.float32), "a": np.zeros(17, np.float32), "c": np.zeros((0,), np.float32)}
    path = save_checkpoint(tmp_path / "x.esdt", tensors, {"note": "hi"})
    raw = path.read_bytes()
    magic, version, hlen = struct.unpack_from("<4sIQ", raw)
    assert magic == b"ESDT" and version == 1
    header = json.loads(raw[16 : 16 + hlen])
    entries = header["tensors"]
    expected, off = {}, 0
    for name in sorted(tensors):
        expected[name] = off
        off = math.ceil((off + 4 * tensors[name].size) / ALIGN) * ALIGN
    assert {k: e["offset"] for k, e in entries.items()} == expected
    assert header["payload_bytes"] == off
    start = math.ceil((16 + hlen) / ALIGN) * ALIGN
    assert len(raw) == start + off
    loaded, meta = load_checkpoint(path)
    assert meta == {"note": "hi"}
    np.testing.assert_array_equal(loaded["b"], tensors["b"])


def test_truncated_payload_rejected(model_file, tmp_path):
    path, *_ = model_file
    bad = tmp_path / "t.esdt"
    bad.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(CheckpointError) as err:
        load_model(bad)
    assert err.value.field == "payload"


def test_bad_magic_and_version_rejected(model_file, tmp_path):
    path, *_ = model_file
    raw = bytearray(path.read_bytes())
    bad = tmp_path / "b.esdt"
    bad.write_bytes(b"NOPE" + bytes(raw[4:]))
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(bad)
    assert err.value.field == "magic"
    struct.pack_into("<I", raw, 4, 99)
    bad.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(bad)
    assert err.value.field == "version"
    bad.write_bytes(b"ES")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


def _rewrite_header(path, tmp_path, edit):
    raw = path.read_bytes()
    _, _, hlen = struct.unpack_from("<4sIQ", raw)
    header = json.loads(raw[16 : 16 + hlen])
    edit(header)
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    assert len(hb) <= hlen
    hb = hb + b" " * (hlen - len(hb))
    out = tmp_path / "h.esdt"
    out.write_bytes(raw[:16] + hb + raw[16 + hlen :])
    return out


def test_offset_violations_rejected(tmp_path):
    tensors = {"a": np.ones(20, np.float32), "b": np.ones(20, np.float32)}
    path = save_checkpoint(tmp_path / "o.esdt", tensors)

    def overlap(h):
        h["tensors"]["b"]["offset"] = 0

    def misalign(h):
        h["tensors"]["b"]["offset"] = 8

    def past_end(h):
        h["tensors"]["b"]["shape"] = [99]

    for edit, field in ((overlap, "tensors.b.offset"), (misalign, "tensors.b.offset"), (past_end, "tensors.b.offset")):
        with pytest.raises(CheckpointError) as err:
            load_checkpoint(_rewrite_header(path, tmp_path, edit))
        assert err.value.field == field


def test_architecture_mismatch_rejected(tmp_path, model_file):
    _, cfg, store = model_file
    store = dict(store)
    store["patch.w"] = np.zeros((3, 3), np.float32)
    path = save_model(tmp_path / "w.esdt", cfg, store, 0)
    with pytest.raises(CheckpointError) as err:
        load_model(path)
    assert "patch.w" in err.value.field


def test_nonfinite_tensors_refused(tmp_path):
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "n.esdt", {"a": np.array([np.nan], np.float32)})
    assert not (tmp_path / "n.esdt").exists()


def test_dataset_determinism_range_and_balance():
    spec = SyntheticImageSpec(size=8, channels=2, classes=4)
    a, la = gen_dataset(spec, 200, seed=3)
    b, lb = gen_dataset(spec, 200, seed=3)
    assert a.tobytes() == b.tobytes() and np.array_equal(la, lb)
    assert a.min() >= -1.0 and a.max() <= 1.0
    c, _ = gen_dataset(spec, 200, seed=4)
    assert not np.array_equal(a, c)
    _, labels = gen_dataset(spec, 10_000, seed=5)
    n, p = 10_000, 0.25
    counts = np.bincount(labels, minlength=4)
    assert np.all(np.abs(counts - n * p) <= 3 * math.sqrt(n * p * (1 - p)))
    with pytest.raises(ValueError):
        gen_dataset(spec, 0, 1)


def test_metrics_header_rows_and_parse_back(tmp_path):
    path = tmp_path / "metrics.csv"
    w = MetricsWriter(path)
    for step in range(3):
        metrics_append(w, {"step": step, "loss_diff": 0.5 / (step + 1), "width": 1.0})
    text = path.read_text()
    assert text.splitlines()[0] == ",".join(METRICS_FIELDS)
    assert text.endswith("\n")
    rows = read_metrics(path)
    assert [int(r["step"]) for r in rows] == [0, 1, 2]
    assert [float(r["loss_diff"]) for r in rows] == [0.5, 0.25, 0.5 / 3]
    assert rows[0]["val_loss"] == ""
    with pytest.raises(KeyError):
        w.append({"bogus": 1})


def test_metrics_resume_truncates(tmp_path):
    path = tmp_path / "metrics.csv"
    w = MetricsWriter(path)
    for step in range(5):
        w.append({"step": step, "loss_diff": float(step)})
    again = MetricsWriter(path)
    again.truncate_after(2)
    again.append({"step": 3, "loss_diff": 9.0})
    assert [r["step"] for r in read_metrics(path)] == ["0", "1", "2", "3"]
    path.write_text("other,header\n")
    with pytest.raises(ValueError):
        MetricsWriter(path)
