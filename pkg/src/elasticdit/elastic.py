"""Elastic supernetwork: width slicing, standalone materialization, joint training."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import numerics as nx
from .losses import DiffusionSample, mse
from .model import ModelConfig, as_tensors, dit_forward, param_specs, width_key
from .numerics import Rng, Tape
from .optim import Adam

log = logging.getLogger(__name__)

__all__ = [
    "slice_map",
    "slice_parameters",
    "scatter_gradients",
    "materialize",
    "subnet_forward",
    "parameter_count",
    "enumerate_parameter_count",
    "ElasticTrainer",
    "StepReport",
]


def slice_map(cfg: ModelConfig) -> dict[str, str]:
    """Slicing rule of every parameter."""
    return {name: spec.rule for name, spec in param_specs(cfg).items()}


def _prefix_index(cfg: ModelConfig, dims, f: float) -> tuple[slice, ...]:
    return tuple(slice(0, cfg.extent(t, f)) for t in dims)


def slice_parameters(store: Mapping[str, np.ndarray], cfg: ModelConfig, f: float) -> dict[str, np.ndarray]:
    """Width-f view of the supernetwork; shared entries alias ``store``."""
    f = cfg.check_width(f)
    view = {}
    for name, spec in param_specs(cfg).items():
        if spec.per_width:
            view[name] = store[width_key(name, f)]
        else:
            view[name] = store[name][_prefix_index(cfg, spec.dims, f)]
    return view


def scatter_gradients(
    grads: Mapping[str, np.ndarray], cfg: ModelConfig, f: float, store: Mapping[str, np.ndarray]
) -> dict[str, np.ndarray]:
    """Embed width-f gradients into full store shapes (zeros elsewhere)."""
    out = {k: np.zeros_like(v) for k, v in store.items()}
    for name, spec in param_specs(cfg).items():
        g = grads.get(name)
        if g is None:
            continue
        if spec.per_width:
            out[width_key(name, f)] += g
        else:
            out[name][_prefix_index(cfg, spec.dims, f)] += g
    return out


def materialize(store: Mapping[str, np.ndarray], cfg: ModelConfig, f: float) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    """Copy the width-f subnetwork into an independent standalone model."""
    sub_cfg = cfg.standalone(f)
    view = slice_parameters(store, cfg, f)
    out = {}
    for name, spec in param_specs(sub_cfg).items():
        key = width_key(name, 1.0) if spec.per_width else name
        out[key] = np.array(view[name], copy=True)
    return sub_cfg, out


def subnet_forward(store, cfg: ModelConfig, x_t, t, cond, f: float, **kw):
    return dit_forward(as_tensors(slice_parameters(store, cfg, f)), cfg, x_t, t, cond, f, **kw)


def enumerate_parameter_count(cfg: ModelConfig, f: float) -> int:
    """Size of the materialized width-f parameter set, by enumeration."""
    return sum(math.prod(cfg.extent(t, f) for t in spec.dims) for spec in param_specs(cfg).values())


def parameter_count(cfg: ModelConfig, f: float = 1.0) -> int:
    """Closed-form parameter count of the width-f subnetwork."""
    f = cfg.check_width(f)
    lay, att = cfg.layout, cfg.attention
    d = cfg.width_at(f)
    kv = att.kv_heads * d // att.query_heads
    kvm = cfg.mid_attention.kv_heads * d // cfg.mid_attention.query_heads
    x = cfg.cross_dim
    cp = cfg.in_channels * cfg.patch_size**2
    c = cfg.cond_dim

    def block(kv_w: int, ffn: int, sparse: bool, heads: int) -> int:
        n = 6 * d  # modulation table
        n += 2 * (d * d + d) + 2 * (kv_w * d + kv_w)  # q, o, k, v
        if sparse:
            n += 2 * (4 * kv_w * kv_w + kv_w) + heads * d + heads  # compression convs, gate
        n += 2 * d  # cross-attention norm affine
        n += (x * d + x) + 2 * (x * c + x) + (d * x + d)  # cross q, k, v, o
        n += ffn * d + ffn + d * ffn + d
        return n

    outer_sparse = lay.use_assa_outer
    total = d * cp + d  # patch embedding
    total += d * cfg.t_freq_dim + d + d * d + d  # timestep MLP
    total += 6 * d * d + 6 * d  # shared modulation projection
    total += (cfg.num_classes + 1) * cfg.cond_len * c + cfg.cond_len * c
    total += (lay.down_depth + lay.up_depth) * block(kv, lay.ffn_ratio_outer * d, outer_sparse, att.query_heads)
    total += lay.middle_depth * block(kvm, lay.ffn_ratio_middle * d, False, cfg.mid_attention.query_heads)
    total += len(lay.skip_topology) * (d * d + d)
    total += 2 * (4 * d * d + d)  # down/up resampling
    if lay.long_skip:
        total += 2 * d * d + d
    total += 2 * d + cp * d + cp  # final layer
    return total


# ---------------------------------------------------------------------------
# training


@dataclass
class StepReport:
    step: int
    width: float
    loss_diff: float
    loss_sub: float
    loss_dist: float
    scale: float
    rejected: bool = False
    extra: dict = field(default_factory=dict)


def _global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


class ElasticTrainer:
    """Joint supernet/subnet flow-matching training with stop-gradient self-distillation.

    Each step pairs the full network with one sub-width drawn uniformly from
    the registered widths below 1.0.  The subnet gradient is rescaled so its
    global norm never exceeds the supernet gradient norm.
    """

    def __init__(
        self,
        cfg: ModelConfig,
        store: dict[str, np.ndarray],
        lr: float = 1e-3,
        lambda_sub: float = 1.0,
        lambda_dist: float = 1.0,
        betas: tuple[float, float] = (0.9, 0.999),
        seed: int = 0,
        elastic: bool = True,
    ):
        self.cfg = cfg
        self.store = store
        self.opt = Adam(store, lr=lr, betas=betas)
        self.lambda_sub = lambda_sub
        self.lambda_dist = lambda_dist
        self.rng = Rng(seed, stream=7)
        self.elastic = elastic and len(cfg.widths) > 1
        self.step_count = 0
        self.incidents: list[str] = []

    def sample_width(self) -> float:
        subs = [f for f in self.cfg.widths if f < 1.0]
        return self.rng.choice(subs)

    def losses(self, batch: DiffusionSample, f_s: float | None):
        """Tape-recorded losses; returns (tape, total, parts, super leaves, sub leaves)."""
        cfg = self.cfg
        sup = as_tensors(slice_parameters(self.store, cfg, 1.0), requires_grad=True, prefix="super/")
        sub = None
        with Tape() as tape:
            v_sup = dit_forward(sup, cfg, batch.x_t, batch.t, batch.cond, 1.0)
            l_diff = mse(v_sup, batch.target)
            total = l_diff
            parts = {"loss_diff": l_diff}
            if f_s is not None:
                sub = as_tensors(slice_parameters(self.store, cfg, f_s), requires_grad=True, prefix="sub/")
                v_sub = dit_forward(sub, cfg, batch.x_t, batch.t, batch.cond, f_s)
                l_sub = mse(v_sub, batch.target)
                l_dist = mse(v_sub, nx.stop_gradient(v_sup))
                total = total + l_sub * self.lambda_sub + l_dist * self.lambda_dist
                parts.update(loss_sub=l_sub, loss_dist=l_dist)
        return tape, total, parts, sup, sub

    def gradients(self, batch: DiffusionSample, f_s: float | None):
        tape, total, parts, sup, sub = self.losses(batch, f_s)
        wrt = {f"super/{k}": v for k, v in sup.items()}
        if sub is not None:
            wrt.update({f"sub/{k}": v for k, v in sub.items()})
        grads = nx.backward(tape, total, wrt)
        g_sup = scatter_gradients({k[6:]: g for k, g in grads.items() if k.startswith("super/")}, self.cfg, 1.0, self.store)
        scale = 1.0
        if sub is not None:
            g_sub = scatter_gradients({k[4:]: g for k, g in grads.items() if k.startswith("sub/")}, self.cfg, f_s, self.store)
            n_sup, n_sub = _global_norm(g_sup), _global_norm(g_sub)
            if n_sub > 0.0:
                scale = min(n_sub, n_sup) / n_sub
            for k in g_sup:
                g_sup[k] += scale * g_sub[k]
        values = {k: float(v.item()) for k, v in parts.items()}
        return g_sup, values, scale

    def step(self, batch: DiffusionSample, f_s: float | None = None) -> StepReport:
        if self.elastic and f_s is None:
            f_s = self.sample_width()
        if f_s is not None and f_s >= 1.0:
            raise ValueError("the sampled subnetwork width must be below 1.0")
        try:
            grads, values, scale = self.gradients(batch, f_s)
        except nx.NumericalError as exc:
            values, grads, scale = {"loss_diff": float("nan")}, None, 0.0
            log.warning("step %d rejected: %s", self.step_count, exc)
        finite = grads is not None and all(math.isfinite(v) for v in values.values()) and all(
            np.all(np.isfinite(g)) for g in grads.values()
        )
        report = StepReport(
            self.step_count,
            f_s if f_s is not None else 1.0,
            values.get("loss_diff", float("nan")),
            values.get("loss_sub", float("nan")),
            values.get("loss_dist", float("nan")),
            scale,
        )
        if not finite:
            report.rejected = True
            msg = f"non-finite loss at step {self.step_count}; update skipped"
            self.incidents.append(msg)
            log.warning(msg)
            self.step_count += 1
            return report
        self.opt.step(grads)
        self.step_count += 1
        return report
