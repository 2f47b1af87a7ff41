"""Multiply-add accounting, wall-clock benchmarks and the frozen validation-loss protocol."""

from __future__ import annotations

import csv
import math
import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import _kernels
from . import numerics as nx
from .attention import AttentionConfig, assa, attention_pair_count, self_attention
from .model import ModelConfig, as_tensors, dit_forward, init_params, iter_block_prefixes
from .numerics import Rng, Tensor

__all__ = [
    "LayerCost",
    "flop_report",
    "LatencyResult",
    "latency_bench",
    "host_fingerprint",
    "attention_layer_bench",
    "compare_backends",
    "EvalSet",
    "eval_val_loss",
    "default_t_grid",
    "write_csv",
    "instrumented_macs",
    "model_predictor",
]


# ---------------------------------------------------------------------------
# FLOP accounting


@dataclass
class LayerCost:
    name: str
    stage: str
    proj: int = 0
    attn: int = 0
    gate: int = 0

    @property
    def total(self) -> int:
        return self.proj + self.attn + self.gate


def _block_cost(name: str, stage: str, kind: str, cfg: ModelConfig, att: AttentionConfig,
                d: int, n: int, batch: int) -> LayerCost:
    kv = att.kv_heads * d // att.query_heads
    x = cfg.cross_dim
    length = cfg.cond_len
    ff = (cfg.layout.ffn_ratio_outer if stage != "mid" else cfg.layout.ffn_ratio_middle) * d
    c = LayerCost(name, stage)
    c.proj += batch * n * (2 * d * d + 2 * kv * d)
    if kind == "assa":
        pairs = attention_pair_count(n, att)
        c.proj += 2 * batch * (n // 4) * kv * 4 * kv
        c.attn += 2 * batch * d * (pairs.global_pairs + pairs.local_pairs)
        c.gate += batch * att.query_heads * d
    else:
        c.attn += 2 * batch * d * n * n
    c.proj += batch * n * x * d + 2 * batch * length * x * cfg.cond_dim + batch * n * d * x
    c.attn += 2 * batch * x * n * length
    c.proj += 2 * batch * n * ff * d
    return c


def flop_report(cfg: ModelConfig, width: float = 1.0, batch: int = 1) -> dict:
    """Per-layer and per-stage multiply-adds of one forward pass.

    Attention terms are pair counts times 2d (scores plus weighted values);
    every projection is output width times input width per token.
    """
    d = cfg.width_at(cfg.check_width(width))
    lay = cfg.layout
    n = cfg.grid**2
    nm = n // 4
    cp = cfg.in_channels * cfg.patch_size**2
    layers = [
        LayerCost("patch", "embed", proj=batch * n * d * cp),
        LayerCost("timestep", "embed", proj=batch * (d * cfg.t_freq_dim + d * d + 6 * d * d)),
    ]
    outer = "assa" if lay.use_assa_outer else "dense"
    for prefix, kind in iter_block_prefixes(cfg):
        stage = prefix.split(".")[0]
        att = cfg.mid_attention if stage == "mid" else cfg.attention
        layers.append(_block_cost(prefix, stage, kind, cfg, att, d, nm if stage == "mid" else n, batch))
    extra = [LayerCost("down.resample", "down", proj=batch * nm * d * 4 * d)]
    extra += [LayerCost(f"mid.skip{j}", "mid", proj=batch * nm * d * d) for j in range(len(lay.skip_topology))]
    extra.append(LayerCost("up.resample", "up", proj=batch * nm * 4 * d * d))
    if lay.long_skip:
        extra.append(LayerCost("long", "up", proj=batch * n * d * 2 * d))
    layers += extra
    layers.append(LayerCost("final", "head", proj=batch * n * cp * d))
    by_stage: dict[str, int] = {}
    for c in layers:
        by_stage[c.stage] = by_stage.get(c.stage, 0) + c.total
    by_tag = {"proj": sum(c.proj for c in layers), "attn": sum(c.attn for c in layers), "gate": sum(c.gate for c in layers)}
    return {
        "layers": layers,
        "by_stage": by_stage,
        "by_tag": by_tag,
        "total": sum(c.total for c in layers),
        "tokens": {"outer": n, "middle": nm},
        "outer_kind": outer,
    }


def instrumented_macs(cfg: ModelConfig, width: float = 1.0, batch: int = 1, seed: int = 0):
    """Execute one forward pass under the MAC counter (the oracle for :func:`flop_report`)."""
    from .elastic import slice_parameters

    rng = Rng(seed, stream=3)
    store = init_params(cfg, rng)
    view = as_tensors(slice_parameters(store, cfg, width))
    x = rng.normal((batch, cfg.in_channels, cfg.latent_size, cfg.latent_size))
    with nx.count_macs() as counter:
        dit_forward(view, cfg, x, np.full(batch, 0.5), np.zeros(batch, dtype=np.int64), width)
    return counter


# ---------------------------------------------------------------------------
# latency


def host_fingerprint() -> dict:
    return {
        "node": platform.node(),
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpus": os.cpu_count(),
        "backend": _kernels.get_backend(),
    }


@dataclass
class LatencyResult:
    name: str
    size: int
    median_ms: float
    q1_ms: float
    q3_ms: float
    repeats: int
    resolution_flag: bool
    host: dict = field(default_factory=dict, repr=False)

    @property
    def iqr_ms(self) -> float:
        return self.q3_ms - self.q1_ms

    def row(self) -> dict:
        d = asdict(self)
        d.pop("host")
        d["iqr_ms"] = self.iqr_ms
        d["host"] = self.host.get("node", "")
        return d


def latency_bench(fn: Callable[[], object], name: str, size: int = 0, repeats: int = 30, warmup: int = 2) -> LatencyResult:
    """Median and quartiles of ``repeats`` timed calls after ``warmup`` discarded ones."""
    if repeats < 30:
        raise ValueError("at least 30 repeats are required")
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    q1, med, q3 = statistics.quantiles(times, n=4, method="inclusive")
    res = time.get_clock_info("perf_counter").resolution
    return LatencyResult(name, size, med * 1e3, q1 * 1e3, q3 * 1e3, repeats, res > 0.01 * med, host_fingerprint())


def _attention_layer(n_side: int, d: int, cfg: AttentionConfig, seed: int):
    rng = Rng(seed, stream=5)
    kv = cfg.kv_heads * d // cfg.query_heads
    shapes = {
        "l.q.w": (d, d), "l.q.b": (d,), "l.k.w": (kv, d), "l.k.b": (kv,), "l.v.w": (kv, d), "l.v.b": (kv,),
        "l.o.w": (d, d), "l.o.b": (d,), "l.kc.w": (kv, kv, 2, 2), "l.kc.b": (kv,),
        "l.vc.w": (kv, kv, 2, 2), "l.vc.b": (kv,), "l.gate.w": (cfg.query_heads, d), "l.gate.b": (cfg.query_heads,),
    }
    params = as_tensors({k: rng.normal(s, 1.0 / math.sqrt(s[-1] if len(s) == 2 else d)) for k, s in shapes.items()})
    hidden = Tensor(rng.normal((1, d, n_side, n_side)))
    return params, hidden


def attention_layer_bench(n_tokens: int = 4096, d: int = 64, cfg: AttentionConfig | None = None,
                          repeats: int = 30, seed: int = 0) -> dict[str, LatencyResult]:
    """Forward time of one ASSA layer against one dense self-attention layer."""
    cfg = cfg or AttentionConfig(query_heads=4, kv_heads=4, block_count=16, radius=1)
    side = int(round(math.sqrt(n_tokens)))
    if side * side != n_tokens:
        raise ValueError("token count must be a perfect square")
    params, hidden = _attention_layer(side, d, cfg, seed)
    return {
        "assa": latency_bench(lambda: assa(hidden, cfg, params, "l"), "assa", n_tokens, repeats),
        "dense": latency_bench(lambda: self_attention(hidden, cfg, params, "l"), "dense", n_tokens, repeats),
    }


def compare_backends(n_tokens: int = 4096, heads: int = 4, head_dim: int = 16, block_count: int = 16,
                     radius: int = 1, repeats: int = 30, seed: int = 0,
                     backends: Iterable[str] | None = None) -> dict[str, LatencyResult]:
    """BNA forward+backward on each available kernel backend."""
    rng = Rng(seed, stream=6)
    q, k, v = (rng.normal((1, heads, n_tokens, head_dim)) for _ in range(3))
    g = rng.normal(q.shape)
    scale = 1.0 / math.sqrt(head_dim)
    if backends is None:
        backends = ["numpy"] + (["numba"] if _kernels.HAVE_NUMBA else [])
    out = {}
    for be in backends:
        def run(be=be):
            o, lse = _kernels.bna_forward(q, k, v, block_count, radius, scale, backend=be)
            _kernels.bna_backward(q, k, v, o, lse, g, block_count, radius, scale, backend=be)
        out[be] = latency_bench(run, f"bna-{be}", n_tokens, repeats)
    return out


def write_csv(path, rows: Sequence[Mapping]) -> None:
    if not rows:
        return
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


# ---------------------------------------------------------------------------
# validation loss


def default_t_grid(k: int = 20) -> np.ndarray:
    """Midpoints of k equal cells of [0, 1]."""
    return (np.arange(k, dtype=np.float64) + 0.5) / k


@dataclass(frozen=True)
class EvalSet:
    """Frozen (x_0, eps, t, cond) tuples; t cycles through a fixed grid."""

    x0: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    cond: np.ndarray

    @classmethod
    def create(cls, x0: np.ndarray, seed: int, cond=None, t_grid: Sequence[float] | None = None) -> "EvalSet":
        x0 = np.asarray(x0, dtype=np.float32)
        n = x0.shape[0]
        rng = Rng(seed, stream=9)
        eps = rng.normal(x0.shape, 1.0, dtype=np.float32)
        grid = default_t_grid() if t_grid is None else np.asarray(t_grid, dtype=np.float64)
        t = grid[np.arange(n) % len(grid)]
        cond = np.zeros(n, dtype=np.int64) if cond is None else np.asarray(cond, dtype=np.int64)
        for a in (x0, eps, t, cond):
            a.setflags(write=False)
        return cls(x0, eps, t, cond)

    def __len__(self) -> int:
        return self.x0.shape[0]

    @property
    def x_t(self) -> np.ndarray:
        tb = self.t.reshape((-1,) + (1,) * (self.x0.ndim - 1)).astype(np.float32)
        return (1 - tb) * self.x0 + tb * self.eps


def eval_val_loss(predict: Callable, evalset: EvalSet, batch: int = 256) -> float:
    """Mean squared velocity error over the frozen tuples.

    ``predict(x_t, t, cond)`` returns a velocity array or tensor.
    """
    x_t = evalset.x_t
    target = evalset.eps - evalset.x0
    total = 0.0
    for s in range(0, len(evalset), batch):
        sl = slice(s, s + batch)
        v = predict(x_t[sl], evalset.t[sl], evalset.cond[sl])
        v = v.data if isinstance(v, Tensor) else np.asarray(v)
        total += float(np.sum((v.astype(np.float64) - target[sl].astype(np.float64)) ** 2))
    return total / target.size


def model_predictor(cfg: ModelConfig, params: Mapping[str, np.ndarray], width: float = 1.0) -> Callable:
    """Velocity callable over a width-resolved parameter view."""
    tensors = as_tensors(params)
    return lambda x, t, c: dit_forward(tensors, cfg, x, t, c, width).data
