"""Command line: ``elasticdit COMMAND [--config FILE] [--set key=value ...] [--seed N] [--out-dir DIR]``.

Configuration is one flat namespace of ``key=value`` pairs (dotted keys for
architecture fields).  ``--dump-config`` prints every key with its default.

Exit codes: 0 success, 1 validation failure, 2 configuration error,
3 numerical incident.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import numerics as nx
from .attention import AttentionConfig
from .data_io import (
    DISTILL_FIELDS,
    METRICS_FIELDS,
    CheckpointError,
    MetricsWriter,
    SyntheticImageSpec,
    gen_dataset,
    load_model,
    save_model,
)
from .model import ModelConfig, StageLayout, init_params

log = logging.getLogger("elasticdit")

EXIT_OK, EXIT_VALIDATION, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3
COMMANDS = ("train", "distill-kd", "distill-step", "slice", "sample", "bench", "oracle-check")


class ConfigError(Exception):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _opt_int(s: str) -> int | None:
    return None if s.strip().lower() in ("", "none") else int(s)


# key -> (default, parser, help)
SCHEMA: dict[str, tuple[Any, Callable[[str], Any], str]] = {
    # architecture
    "model.in_channels": (2, int, "latent channels"),
    "model.latent_size": (4, int, "latent height and width"),
    "model.patch_size": (2, int, "patch size"),
    "model.cond_dim": (32, int, "condition token width"),
    "model.cond_len": (4, int, "condition tokens per class"),
    "model.num_classes": (2, int, "classes (the null label is num_classes)"),
    "model.t_freq_dim": (32, int, "sinusoidal timestep features"),
    "model.cross_width": (None, _opt_int, "cross-attention inner width (default: hidden width)"),
    "model.pos_embed": (True, _bool, "2-D sin-cos position embedding"),
    "model.widths": ((0.375, 0.5, 1.0), _floats, "registered width fractions"),
    "layout.down_depth": (2, int, ""),
    "layout.middle_depth": (4, int, ""),
    "layout.up_depth": (2, int, ""),
    "layout.hidden_width": (64, int, ""),
    "layout.ffn_ratio_outer": (4, int, ""),
    "layout.ffn_ratio_middle": (3, int, ""),
    "layout.use_assa_outer": (True, _bool, ""),
    "layout.long_skip": (True, _bool, ""),
    "attention.query_heads": (4, int, ""),
    "attention.kv_heads": (4, int, ""),
    "attention.block_count": (2, int, "BNA blocks B"),
    "attention.radius": (1, int, "BNA radius r"),
    "attention.boundary": ("shift", str, "shift or clip"),
    # data
    "data.kind": ("gmm", str, "gmm or images"),
    "data.size": (20000, int, "training set size"),
    "data.eval_size": (2048, int, "frozen validation tuples"),
    "data.separation": (0.8, float, "GMM mean magnitude"),
    "data.variance": (0.1, float, "GMM component variance"),
    "data.classes": (4, int, "classes of the synthetic image set"),
    # training
    "train.steps": (1000, int, ""),
    "train.batch": (64, int, ""),
    "train.lr": (1e-3, float, ""),
    "train.elastic": (True, _bool, "joint supernet/subnet training"),
    "train.lambda_sub": (1.0, float, ""),
    "train.lambda_dist": (1.0, float, ""),
    "train.cond_drop": (0.1, float, "label dropout for guidance"),
    "train.conditional": (True, _bool, "use class labels"),
    "train.eval_every": (250, int, ""),
    "train.ckpt_every": (250, int, ""),
    "train.wall_time": (False, _bool, "record wall_ms (breaks byte-identical reruns)"),
    # knowledge distillation (timestep-aware)
    "kd.teacher": ("analytic", str, "'analytic' or a checkpoint path"),
    "kd.schedule": ("constant", str, "constant or piecewise"),
    "kd.w": (0.5, float, "constant schedule weight"),
    "kd.knots": ((0.0, 1.0), _floats, "piecewise schedule knots"),
    "kd.values": ((0.5, 0.5), _floats, "piecewise schedule values"),
    "kd.w_feat": (1.0, float, "feature loss weight"),
    # step distillation
    "distill.iterations": (2000, int, ""),
    "distill.batch": (64, int, ""),
    "distill.teacher": ("analytic", str, "'analytic' or a checkpoint path"),
    "distill.rank": (64, int, ""),
    "distill.alpha": (128.0, float, ""),
    "distill.lr_student": (1e-4, float, ""),
    "distill.lr_critic": (1e-4, float, ""),
    "distill.w_out": (1.0, float, ""),
    "distill.w_feat": (1.0, float, ""),
    "distill.student_t": ("grid", str, "grid or uniform"),
    "distill.normalize": (False, _bool, "normalize the DMD direction per sample"),
    "distill.probe_every": (500, int, "MMD probe period (0 disables)"),
    "distill.probe_n": (1000, int, ""),
    # slicing, sampling, bench
    "checkpoint": ("", str, "input checkpoint"),
    "width": (1.0, float, "width fraction"),
    "steps": (4, int, "sampler steps"),
    "shift": (3.0, float, "sampler time shift"),
    "cfg": (4.0, float, "guidance scale"),
    "n": (16, int, "samples to draw"),
    "label": (-1, int, "class label (-1: null condition)"),
    "bench.tokens": (4096, int, ""),
    "bench.hidden": (64, int, ""),
    "bench.repeats": (30, int, ""),
    "bench.block_count": (16, int, ""),
    "bench.radius": (1, int, ""),
    "bench.latency": (True, _bool, "run wall-clock benchmarks"),
    "resume": (True, _bool, "resume from out-dir checkpoint"),
}


def parse_kv(text: str, source: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"{source}: expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def load_config(path: str | None, overrides: Sequence[str]) -> dict[str, Any]:
    raw: dict[str, str] = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} not found")
        for i, line in enumerate(p.read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if line:
                k, v = parse_kv(line, f"{path}:{i}")
                raw[k] = v
    for item in overrides:
        k, v = parse_kv(item, "--set")
        raw[k] = v
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    cfg = {k: d for k, (d, _, _) in SCHEMA.items()}
    for k, v in raw.items():
        try:
            cfg[k] = SCHEMA[k][1](v)
        except ValueError as exc:
            raise ConfigError(f"{k}: {exc}") from None
    return cfg


def dump_config(cfg: dict[str, Any]) -> str:
    lines = []
    for k, v in cfg.items():
        if isinstance(v, tuple):
            v = ",".join(f"{x:g}" for x in v)
        elif v is None:
            v = "none"
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def model_config(c: dict[str, Any]) -> ModelConfig:
    try:
        return ModelConfig(
            in_channels=c["model.in_channels"],
            latent_size=c["model.latent_size"],
            patch_size=c["model.patch_size"],
            layout=StageLayout(
                c["layout.down_depth"], c["layout.middle_depth"], c["layout.up_depth"], c["layout.hidden_width"],
                c["layout.ffn_ratio_outer"], c["layout.ffn_ratio_middle"], c["layout.use_assa_outer"],
                None, c["layout.long_skip"],
            ),
            attention=AttentionConfig(
                c["attention.query_heads"], c["attention.kv_heads"], c["attention.block_count"],
                c["attention.radius"], 2, c["attention.boundary"],
            ),
            cond_dim=c["model.cond_dim"],
            cond_len=c["model.cond_len"],
            num_classes=c["model.num_classes"],
            t_freq_dim=c["model.t_freq_dim"],
            cross_width=c["model.cross_width"],
            widths=c["model.widths"],
            pos_embed=c["model.pos_embed"],
        )
    except (ValueError, nx.ShapeError) as exc:
        raise ConfigError(f"invalid architecture: {exc}") from None


def _gmm_spec(c, mcfg: ModelConfig):
    from .oracle import GMMSpec

    return GMMSpec.default(mcfg.in_channels, mcfg.latent_size, c["data.separation"], c["data.variance"])


def build_data(c: dict[str, Any], mcfg: ModelConfig, seed: int):
    """Training set and frozen validation tuples."""
    from .bench import EvalSet
    from .oracle import gmm_sample
    from .training import Dataset

    if c["data.kind"] == "gmm":
        spec = _gmm_spec(c, mcfg)
        if spec.n_components > mcfg.num_classes:
            raise ConfigError("the GMM needs model.num_classes >= 2 for component labels")
        x, lab = gmm_sample(spec, c["data.size"], nx.Rng(seed, stream=201), return_labels=True, dtype=np.float32)
        ex, elab = gmm_sample(spec, c["data.eval_size"], nx.Rng(seed, stream=202), return_labels=True, dtype=np.float32)
    elif c["data.kind"] == "images":
        ispec = SyntheticImageSpec(mcfg.latent_size, mcfg.in_channels, c["data.classes"])
        if c["data.classes"] > mcfg.num_classes:
            raise ConfigError("model.num_classes must cover data.classes")
        x, lab = gen_dataset(ispec, c["data.size"], seed)
        ex, elab = gen_dataset(ispec, c["data.eval_size"], seed + 1)
    else:
        raise ConfigError(f"data.kind must be gmm or images, got {c['data.kind']!r}")
    if not c["train.conditional"]:
        elab = np.full(len(ex), mcfg.num_classes)
    return Dataset(x, lab), EvalSet.create(ex, seed + 7, cond=elab)


# ---------------------------------------------------------------------------
# commands


def _writer(out: Path, fields, key: str, resume_at: int | None) -> MetricsWriter:
    path = out / ("metrics.csv" if fields == METRICS_FIELDS else "distill.csv")
    if resume_at is None and path.exists():
        path.unlink()
    w = MetricsWriter(path, fields, key)
    if resume_at is not None:
        w.truncate_after(resume_at - 1)
    return w


def cmd_train(c, seed: int, out: Path) -> int:
    from .bench import eval_val_loss, model_predictor
    from .elastic import ElasticTrainer, slice_parameters
    from .training import train_elastic

    mcfg = model_config(c)
    data, evalset = build_data(c, mcfg, seed)
    ckpt = out / "checkpoint.esdt"
    start = 0
    if c["resume"] and ckpt.exists():
        mcfg_saved, store, state, meta = load_model(ckpt)
        if mcfg_saved != mcfg:
            raise ConfigError("existing checkpoint in out-dir has a different architecture")
        trainer = ElasticTrainer(mcfg, store, c["train.lr"], c["train.lambda_sub"], c["train.lambda_dist"],
                                 seed=seed, elastic=c["train.elastic"])
        trainer.opt.load_state(state, meta["adam_steps"])
        start = int(meta["step"])
        log.info("resuming from step %d", start)
    else:
        store = init_params(mcfg, nx.Rng(seed))
        trainer = ElasticTrainer(mcfg, store, c["train.lr"], c["train.lambda_sub"], c["train.lambda_dist"],
                                 seed=seed, elastic=c["train.elastic"])
    writer = _writer(out, METRICS_FIELDS, "step", start if start else None)
    t0 = time.perf_counter()
    steps = c["train.steps"]

    def save(step: int) -> None:
        save_model(ckpt, mcfg, store, seed, {"step": step, "adam_steps": trainer.opt.step_count}, trainer.opt.state())

    def callback(step: int, rep) -> None:
        row = {
            "step": step,
            "wall_ms": round((time.perf_counter() - t0) * 1e3, 3) if c["train.wall_time"] else None,
            "loss_diff": rep.loss_diff,
            "loss_dist": rep.loss_dist,
            "width": rep.width,
        }
        done = step + 1
        if c["train.eval_every"] and (done % c["train.eval_every"] == 0 or done == steps):
            row["val_loss"] = eval_val_loss(model_predictor(mcfg, slice_parameters(store, mcfg, 1.0)), evalset)
        writer.append(row)
        if c["train.ckpt_every"] and (done % c["train.ckpt_every"] == 0 or done == steps):
            save(done)

    try:
        train_elastic(trainer, data, steps, c["train.batch"], seed, start, c["train.cond_drop"],
                      c["train.conditional"], callback)
    except nx.NumericalError as exc:
        log.error("numerical incident: %s", exc)
        return EXIT_NUMERICAL
    finals = {f"{f:g}": eval_val_loss(model_predictor(mcfg, slice_parameters(store, mcfg, f), f), evalset)
              for f in mcfg.widths}
    (out / "eval.json").write_text(json.dumps({"val_loss": finals, "incidents": trainer.incidents}, indent=2) + "\n")
    print(json.dumps({"val_loss": finals}))
    return EXIT_OK


def _teacher_from(spec_key: str, c, mcfg: ModelConfig):
    """Analytic GMM teacher or a DiT checkpoint (few-step LoRA from the checkpoint when present)."""
    from .kdmd import AnalyticTeacher, DiTVelocity, LoRAAdapter

    if spec_key == "analytic":
        if c["data.kind"] != "gmm":
            raise ConfigError("the analytic teacher needs data.kind=gmm")
        t = AnalyticTeacher(_gmm_spec(c, mcfg))
        return t, t
    path = Path(spec_key)
    if not path.is_file():
        raise ConfigError(f"teacher checkpoint {spec_key} not found")
    tcfg, tstore, tstate, tmeta = load_model(path)
    lora = None
    factors = {k[5:]: v for k, v in tstate.items() if k.startswith("lora/")}
    if factors:
        lora = LoRAAdapter(factors, int(tmeta.get("lora_rank", 64)), float(tmeta.get("lora_alpha", 128.0)))
    base = DiTVelocity.from_store(tcfg, tstore, 1.0, lora=lora, lora_enabled=False)
    return base, base.with_lora(True)


def _student_store(c, seed: int) -> tuple[ModelConfig, dict]:
    """Standalone student: a width extracted from ``checkpoint`` or a fresh model."""
    from .elastic import materialize

    if c["checkpoint"]:
        path = Path(c["checkpoint"])
        if not path.is_file():
            raise ConfigError(f"checkpoint {path} not found")
        scfg, store, _, _ = load_model(path)
        try:
            return materialize(store, scfg, c["width"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    mcfg = model_config(c).standalone(c["width"]) if c["width"] != 1.0 else model_config(c)
    mcfg = ModelConfig.from_dict({**mcfg.to_dict(), "widths": (1.0,)})
    return mcfg, init_params(mcfg, nx.Rng(seed))


def cmd_distill_kd(c, seed: int, out: Path) -> int:
    from .bench import eval_val_loss, model_predictor
    from .elastic import slice_parameters
    from .kdmd import DiTVelocity
    from .losses import ConstantSchedule, PiecewiseLinearSchedule
    from .training import KDTrainer, draw_batch

    scfg, store = _student_store(c, seed)
    data, evalset = build_data(c, scfg, seed)
    teacher, _ = _teacher_from(c["kd.teacher"], c, scfg)
    if c["kd.schedule"] == "constant":
        schedule = ConstantSchedule(c["kd.w"])
    elif c["kd.schedule"] == "piecewise":
        schedule = PiecewiseLinearSchedule(c["kd.knots"], c["kd.values"])
    else:
        raise ConfigError("kd.schedule must be constant or piecewise")
    feats = None
    tw = None
    if isinstance(teacher, DiTVelocity) and c["kd.w_feat"] > 0:
        def feats(x, t, cond):
            v, f = teacher.forward(x, t, cond, return_features=True)
            return v.data, f.data
        tw = teacher.cfg.width_at(1.0)
    trainer = KDTrainer(scfg, store, teacher, schedule, c["train.lr"], 1.0, feats, tw, seed, c["kd.w_feat"])
    writer = _writer(out, METRICS_FIELDS, "step", None)
    null = scfg.num_classes
    steps = c["train.steps"]
    for step in range(steps):
        b = draw_batch(data, step, c["train.batch"], seed, null, c["train.cond_drop"], c["train.conditional"])
        row = trainer.step(b)
        if row.pop("rejected"):
            log.error("non-finite loss at step %d", step)
            return EXIT_NUMERICAL
        rec = {"step": step, **row, "width": c["width"]}
        if c["train.eval_every"] and ((step + 1) % c["train.eval_every"] == 0 or step + 1 == steps):
            rec["val_loss"] = eval_val_loss(model_predictor(scfg, slice_parameters(store, scfg, 1.0)), evalset)
        writer.append(rec)
    save_model(out / "student.esdt", scfg, store, seed, {"step": steps})
    return EXIT_OK


def cmd_distill_step(c, seed: int, out: Path) -> int:
    from .elastic import slice_parameters
    from .kdmd import DistillConfig, DistillRoles, few_step_sample
    from .oracle import gmm_sample, mmd_distance
    from .training import run_kdmd

    if not c["checkpoint"]:
        raise ConfigError("distill-step needs checkpoint=<pretrained model>")
    scfg, store = _student_store(c, seed)
    data, _ = build_data(c, scfg, seed)
    teacher, fewstep = _teacher_from(c["distill.teacher"], c, scfg)
    dcfg = DistillConfig(
        guidance=c["cfg"], shift=c["shift"], steps=c["steps"], w_out=c["distill.w_out"], w_feat=c["distill.w_feat"],
        student_t=c["distill.student_t"], normalize_dmd=c["distill.normalize"],
        lr_student=c["distill.lr_student"], lr_critic=c["distill.lr_critic"],
    )
    tfw = fewstep.cfg.width_at(1.0) if hasattr(fewstep, "cfg") else None
    base = slice_parameters(store, scfg, 1.0)
    roles = DistillRoles.create(scfg, base, teacher, fewstep, dcfg, seed, c["distill.rank"], c["distill.alpha"],
                                teacher_feature_width=tfw)
    probe = None
    if c["data.kind"] == "gmm" and c["distill.probe_every"]:
        spec = _gmm_spec(c, scfg)
        ref = gmm_sample(spec, c["distill.probe_n"], nx.Rng(seed, stream=301))
        noise = nx.Rng(seed, stream=302).normal((c["distill.probe_n"],) + spec.shape, 1.0)

        def probe(it: int) -> float:
            s = few_step_sample(roles.student, c["steps"], c["shift"], None, 1.0, noise=noise)
            return mmd_distance(s, ref)

    writer = _writer(out, DISTILL_FIELDS, "iteration", None)
    rejected = 0

    def callback(rep) -> None:
        nonlocal rejected
        rejected = rejected + 1 if rep.rejected else 0
        writer.append(rep.row())

    run_kdmd(roles, data, c["distill.iterations"], c["distill.batch"], seed, 0, callback, probe, c["distill.probe_every"])
    if rejected >= 10:
        return EXIT_NUMERICAL
    state = {f"lora/{k}": v for k, v in roles.student.lora.factors.items()}
    save_model(out / "student.esdt", scfg, store, seed,
               {"lora_rank": roles.student.lora.rank, "lora_alpha": roles.student.lora.alpha}, state)
    return EXIT_OK


def cmd_slice(c, seed: int, out: Path) -> int:
    from .elastic import materialize, slice_parameters, subnet_forward
    from .model import as_tensors, dit_forward

    if not c["checkpoint"]:
        raise ConfigError("slice needs checkpoint=<supernetwork>")
    path = Path(c["checkpoint"])
    if not path.is_file():
        raise ConfigError(f"checkpoint {path} not found")
    mcfg, store, _, meta = load_model(path)
    f = c["width"]
    try:
        scfg, sstore = materialize(store, mcfg, f)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    rng = nx.Rng(seed, stream=401)
    x = rng.normal((4, mcfg.in_channels, mcfg.latent_size, mcfg.latent_size))
    t = rng.uniform(0.0, 1.0, 4, dtype=np.float64)
    cond = rng.integers(0, mcfg.num_classes + 1, 4)
    a = subnet_forward(store, mcfg, x, t, cond, f).data
    target = out / f"slice_w{f:g}.esdt"
    save_model(target, scfg, sstore, int(meta.get("seed", seed)), {"source": str(path), "width": f})
    rcfg, rstore, _, _ = load_model(target)
    b = dit_forward(as_tensors(slice_parameters(rstore, rcfg, 1.0)), rcfg, x, t, cond, 1.0).data
    err = float(np.max(np.abs(a - b)))
    print(json.dumps({"width": f, "checkpoint": str(target), "max_abs_diff": err}))
    return EXIT_OK if err <= 1e-6 else EXIT_VALIDATION


def write_pgm(path: Path, img: np.ndarray) -> None:
    """Binary greyscale PGM of a [-1, 1] image."""
    g = np.clip(np.round((np.asarray(img, np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    h, w = g.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + g.tobytes())


def cmd_sample(c, seed: int, out: Path) -> int:
    from .kdmd import DiTVelocity, LoRAAdapter, few_step_sample, shift_knots

    if not c["checkpoint"]:
        raise ConfigError("sample needs checkpoint=<model>")
    path = Path(c["checkpoint"])
    if not path.is_file():
        raise ConfigError(f"checkpoint {path} not found")
    mcfg, store, state, meta = load_model(path)
    try:
        f = mcfg.check_width(c["width"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if c["steps"] < 1:
        raise ConfigError("steps must be at least 1")
    factors = {k[5:]: v for k, v in state.items() if k.startswith("lora/")}
    lora = LoRAAdapter(factors, int(meta.get("lora_rank", 64)), float(meta.get("lora_alpha", 128.0))) if factors else None
    model = DiTVelocity.from_store(mcfg, store, f, lora=lora)
    n = c["n"]
    label = mcfg.num_classes if c["label"] < 0 else c["label"]
    if not 0 <= label <= mcfg.num_classes:
        raise ConfigError(f"label must lie in [-1, {mcfg.num_classes - 1}]")
    noise = nx.Rng(seed, stream=501).normal((n, mcfg.in_channels, mcfg.latent_size, mcfg.latent_size), 1.0)
    samples = few_step_sample(model, c["steps"], c["shift"], np.full(n, label), c["cfg"], noise=noise)
    np.save(out / "samples.npy", samples)
    previews = out / "previews"
    previews.mkdir(exist_ok=True)
    for i, s in enumerate(samples):
        write_pgm(previews / f"sample_{i:03d}.pgm", s[0])
    knots = shift_knots(c["steps"], c["shift"]).tolist()
    (out / "knots.json").write_text(json.dumps({"knots": knots, "guidance": c["cfg"], "n": n}) + "\n")
    print(json.dumps({"samples": str(out / "samples.npy"), "knots": knots}))
    return EXIT_OK


def cmd_bench(c, seed: int, out: Path) -> int:
    from .bench import attention_layer_bench, compare_backends, flop_report, write_csv

    mcfg = model_config(c)
    rows = []
    for f in mcfg.widths:
        rep = flop_report(mcfg, f)
        for layer in rep["layers"]:
            rows.append({"width": f, "layer": layer.name, "stage": layer.stage, "proj": layer.proj,
                         "attn": layer.attn, "gate": layer.gate, "total": layer.total})
    write_csv(out / "flops.csv", rows)
    print(f"{'width':>6} {'total MACs':>14}")
    for f in mcfg.widths:
        print(f"{f:>6g} {flop_report(mcfg, f)['total']:>14,d}")
    if c["bench.latency"]:
        acfg = AttentionConfig(4, 4, c["bench.block_count"], c["bench.radius"])
        res = attention_layer_bench(c["bench.tokens"], c["bench.hidden"], acfg, c["bench.repeats"], seed)
        back = compare_backends(c["bench.tokens"], block_count=c["bench.block_count"], radius=c["bench.radius"],
                                repeats=c["bench.repeats"], seed=seed)
        lat = [r.row() for r in list(res.values()) + list(back.values())]
        write_csv(out / "latency.csv", lat)
        ratio = res["assa"].median_ms / res["dense"].median_ms
        for r in lat:
            flag = " (timer resolution)" if r["resolution_flag"] else ""
            print(f"{r['name']:>10} median {r['median_ms']:9.2f} ms  IQR {r['iqr_ms']:7.2f} ms{flag}")
        print(f"assa/dense median ratio: {ratio:.3f}")
    return EXIT_OK


def cmd_oracle_check(c, seed: int, out: Path) -> int:
    from .checks import run_all

    results = run_all(seed)
    failed = 0
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
        failed += not r.passed
    (out / "oracle_check.json").write_text(
        json.dumps([{"name": r.name, "passed": r.passed, "detail": r.detail} for r in results], indent=2) + "\n"
    )
    return EXIT_VALIDATION if failed else EXIT_OK


HANDLERS = {
    "train": cmd_train,
    "distill-kd": cmd_distill_kd,
    "distill-step": cmd_distill_step,
    "slice": cmd_slice,
    "sample": cmd_sample,
    "bench": cmd_bench,
    "oracle-check": cmd_oracle_check,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value configuration file")
    common.add_argument("--set", dest="overrides", nargs="+", action="extend", default=[], metavar="KEY=VALUE")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default="runs")
    common.add_argument("--dump-config", action="store_true", help="print the resolved configuration and exit")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="elasticdit", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HANDLERS[name].__name__.replace("cmd_", "").replace("_", " "))
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.dump_config:
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    out = Path(args.out_dir)
    try:
        if args.command not in ("oracle-check",):
            model_config(cfg)  # validate the architecture before touching the filesystem
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(dump_config(cfg))
        return HANDLERS[args.command](cfg, args.seed, out)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except nx.NumericalError as exc:
        print(f"numerical incident: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
