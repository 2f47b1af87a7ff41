"""Training loops shared by the command line and the acceptance suite.

Every random draw in these loops comes from an Rng stream keyed by the step
index, so a run resumed from a checkpoint at step k replays exactly the
batches an uninterrupted run would have seen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .elastic import ElasticTrainer, scatter_gradients, slice_parameters
from .kdmd import DistillReport, DistillRoles, kdmd_step
from .losses import DiffusionSample, FeatureProjector, feature_kd_loss, mse, sample_xt, timestep_scaled_kd
from .model import ModelConfig, as_tensors, dit_forward
from .numerics import NumericalError, Rng, Tape
from .optim import Adam

__all__ = [
    "Dataset",
    "draw_batch",
    "train_elastic",
    "KDTrainer",
    "run_kdmd",
]

BATCH_STREAM = 1 << 20


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return self.x.shape[0]


def draw_batch(data: Dataset, step: int, batch: int, seed: int, null_label: int,
               cond_drop: float = 0.0, conditional: bool = True) -> DiffusionSample:
    """Minibatch for ``step``: data indices, noise, t ~ U[0, 1) and (possibly dropped) labels."""
    rng = Rng(seed, stream=BATCH_STREAM + step)
    idx = rng.integers(0, len(data), batch)
    x0 = data.x[idx].astype(np.float32)
    eps = rng.normal(x0.shape, 1.0, dtype=np.float32)
    t = rng.uniform(0.0, 1.0, batch, dtype=np.float64)
    if data.labels is None or not conditional:
        cond = np.full(batch, null_label, dtype=np.int64)
    else:
        cond = data.labels[idx].astype(np.int64)
        if cond_drop > 0:
            cond = np.where(rng.uniform(0.0, 1.0, batch, dtype=np.float64) < cond_drop, null_label, cond)
    return sample_xt(x0, eps, t, cond)


def train_elastic(
    trainer: ElasticTrainer,
    data: Dataset,
    steps: int,
    batch: int,
    seed: int,
    start: int = 0,
    cond_drop: float = 0.0,
    conditional: bool = True,
    callback: Callable | None = None,
    max_rejects: int = 10,
):
    """Run ``trainer`` from step ``start`` to ``steps``; ``callback(step, report)`` after each step.

    Raises :class:`NumericalError` after ``max_rejects`` consecutive rejected steps.
    """
    null = trainer.cfg.num_classes
    streak = 0
    trainer.step_count = start
    for step in range(start, steps):
        b = draw_batch(data, step, batch, seed, null, cond_drop, conditional)
        f_s = None
        if trainer.elastic:
            subs = [f for f in trainer.cfg.widths if f < 1.0]
            f_s = Rng(seed, stream=BATCH_STREAM * 2 + step).choice(subs)
        report = trainer.step(b, f_s)
        streak = streak + 1 if report.rejected else 0
        if streak >= max_rejects:
            raise NumericalError(f"{streak} consecutive non-finite steps ending at step {step}")
        if callback is not None:
            callback(step, report)
    return trainer


class KDTrainer:
    """Knowledge distillation with timestep-aware mixing of flow matching and output matching.

    ``teacher(x_t, t, cond)`` returns a velocity array; for a feature-matching
    teacher pass ``teacher_features`` returning (velocity, features).
    """

    def __init__(self, cfg: ModelConfig, store: dict, teacher: Callable, schedule: Callable,
                 lr: float = 1e-3, width: float = 1.0, teacher_features: Callable | None = None,
                 teacher_width: int | None = None, seed: int = 0, w_feat: float = 1.0):
        self.cfg = cfg
        self.store = store
        self.width = cfg.check_width(width)
        self.teacher = teacher
        self.teacher_features = teacher_features
        self.schedule = schedule
        self.w_feat = w_feat
        self.projector = None
        params = dict(store)
        if teacher_features is not None:
            sw = cfg.width_at(width)
            tw = teacher_width or sw
            self.projector = FeatureProjector(sw, tw, Rng(seed, stream=31), identity=sw == tw)
            params.update(self.projector.params)
        self.opt = Adam(params, lr=lr)

    def step(self, batch: DiffusionSample) -> dict:
        view = slice_parameters(self.store, self.cfg, self.width)
        leaves = as_tensors(view, requires_grad=True, prefix="s/")
        proj = as_tensors(self.projector.params, requires_grad=True, prefix="p/") if self.projector else None
        if self.teacher_features is not None:
            tv, tfeat = self.teacher_features(batch.x_t, batch.t, batch.cond)
        else:
            tv, tfeat = np.asarray(self.teacher(batch.x_t, batch.t, batch.cond)), None
        with Tape() as tape:
            v, feat = dit_forward(leaves, self.cfg, batch.x_t, batch.t, batch.cond, self.width, return_features=True)
            l_diff = mse(v, batch.target, per_sample=True)
            l_out = mse(v, nx.stop_gradient(nx.as_tensor(tv.astype(v.dtype))), per_sample=True)
            l_feat = None
            if tfeat is not None:
                l_feat = feature_kd_loss(tfeat, feat, self.projector, proj) * self.w_feat
            total = timestep_scaled_kd(l_diff, l_out, batch.t, self.schedule, l_feat)
        wrt = {f"s/{k}": t for k, t in leaves.items()}
        if proj is not None:
            wrt.update({f"p/{k}": t for k, t in proj.items()})
        grads = nx.backward(tape, total, wrt)
        value = float(total.item())
        row = {
            "loss_diff": float(l_diff.data.mean()),
            "loss_out": float(l_out.data.mean()),
            "loss_feat": float(l_feat.item()) if l_feat is not None else float("nan"),
            "rejected": not math.isfinite(value),
        }
        if row["rejected"]:
            return row
        g = scatter_gradients({k[2:]: v for k, v in grads.items() if k.startswith("s/")}, self.cfg, self.width, self.store)
        g.update({k[2:]: v for k, v in grads.items() if k.startswith("p/")})
        self.opt.step(g)
        return row


def run_kdmd(
    roles: DistillRoles,
    data: Dataset,
    iterations: int,
    batch: int,
    seed: int,
    start: int = 0,
    callback: Callable[[DistillReport], None] | None = None,
    probe: Callable[[int], float] | None = None,
    probe_every: int = 0,
) -> DistillRoles:
    """K-DMD iterations with per-iteration batches drawn from ``data``.

    The roles' generator is re-keyed every iteration so runs can resume.
    """
    for it in range(start, iterations):
        rng = Rng(seed, stream=BATCH_STREAM * 3 + it)
        x0 = data.x[rng.integers(0, len(data), batch)].astype(np.float32)
        roles.rng = Rng(seed, stream=BATCH_STREAM * 4 + it)
        report = kdmd_step(roles, x0, it)
        if probe is not None and probe_every and (it + 1) % probe_every == 0:
            report.mmd = probe(it)
        if callback is not None:
            callback(report)
    return roles
