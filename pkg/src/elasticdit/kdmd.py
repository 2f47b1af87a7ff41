"""Step distillation: DMD gradient, knowledge-guided DMD, LoRA adapters and the few-step sampler.

Roles follow the usual DMD arrangement.  The student is a LoRA-adapted copy
of a base network; the critic starts as an exact copy of the student and is
trained by flow matching on the student's own predictions; the teacher
supplies the data-distribution velocity (with classifier-free guidance) and
its few-step variant supplies output and feature targets for the same x_t.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from . import numerics as nx
from .elastic import slice_parameters
from .losses import FeatureProjector, feature_kd_loss, mse, output_kd_loss, sample_xt
from .model import ModelConfig, as_tensors, dit_forward, iter_block_prefixes
from .numerics import NumericalError, Rng, ShapeError, Tape, Tensor
from .optim import Adam
from .oracle import GMMSpec, analytic_velocity

log = logging.getLogger(__name__)

__all__ = [
    "predict_x0",
    "rediffuse",
    "cfg_velocity",
    "LoRAAdapter",
    "lora_apply",
    "lora_merge",
    "lora_targets",
    "AnalyticTeacher",
    "DiTVelocity",
    "DistillRoles",
    "dmd_student_loss",
    "critic_update",
    "kdmd_step",
    "shift_knots",
    "few_step_sample",
    "STUDENT_EVERY",
]

STUDENT_EVERY = 5
TAU_RANGE = (0.02, 0.98)


def _bcast_t(t, x) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    n = x.shape[0]
    if t.size not in (1, n):
        raise ShapeError(f"{t.size} timesteps for a batch of {n}")
    return np.broadcast_to(t, (n,)).reshape((-1,) + (1,) * (x.ndim - 1)).astype(x.dtype)


def predict_x0(x_t, t, v):
    """x_0 estimate x_t - t v (works on arrays and tensors)."""
    if isinstance(x_t, Tensor) or isinstance(v, Tensor):
        x_t, v = nx.as_tensor(x_t), nx.as_tensor(v)
        if x_t.shape != v.shape:
            raise ShapeError(f"x_t {x_t.shape} vs velocity {v.shape}")
        return x_t - v * _bcast_t(t, x_t.data)
    x_t, v = np.asarray(x_t), np.asarray(v)
    if x_t.shape != v.shape:
        raise ShapeError(f"x_t {x_t.shape} vs velocity {v.shape}")
    return x_t - _bcast_t(t, x_t) * v


def rediffuse(x0_hat, tau, eps):
    """Forward-diffuse an x_0 estimate to time tau with fresh noise."""
    tau_arr = np.asarray(tau, dtype=np.float64)
    if np.any(tau_arr < 0.0) or np.any(tau_arr > 1.0):
        raise ValueError("tau must lie in [0, 1]")
    if isinstance(x0_hat, Tensor):
        tb = _bcast_t(tau_arr, x0_hat.data)
        return x0_hat * (1.0 - tb) + eps * tb
    x0_hat = np.asarray(x0_hat)
    tb = _bcast_t(tau_arr, x0_hat)
    return (1 - tb) * x0_hat + tb * np.asarray(eps, dtype=x0_hat.dtype)


class VelocityModel(Protocol):
    null_label: int

    def __call__(self, x, t, cond): ...


def cfg_velocity(model: Callable, x, t, cond, guidance: float, null_label: int | None = None):
    """Classifier-free guidance: v_u + g (v_c - v_u)."""
    v_c = model(x, t, cond)
    if guidance == 1.0:
        return v_c
    null = getattr(model, "null_label", None) if null_label is None else null_label
    if null is None:
        raise ValueError("guidance needs a model with a null condition")
    n = x.shape[0]
    v_u = model(x, t, np.full(n, null, dtype=np.int64))
    if guidance == 0.0:
        return v_u
    return v_u + (v_c - v_u) * guidance


# ---------------------------------------------------------------------------
# LoRA


_LORA_SUFFIXES = (
    ".attn.q.w", ".attn.k.w", ".attn.v.w", ".attn.o.w",
    ".cross.q.w", ".cross.k.w", ".cross.v.w", ".cross.o.w",
    ".ffn.fc1.w", ".ffn.fc2.w",
)


def lora_targets(cfg: ModelConfig) -> list[str]:
    """Every attention and FFN projection weight."""
    out = []
    for prefix, _ in iter_block_prefixes(cfg):
        out.extend(prefix + s for s in _LORA_SUFFIXES)
    return out


@dataclass
class LoRAAdapter:
    """Low-rank deltas ``(alpha / rank) A B`` with ``A`` (out, rank) and ``B`` (rank, in)."""

    factors: dict[str, np.ndarray]  # "{target}.A" / "{target}.B"
    rank: int = 64
    alpha: float = 128.0

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def targets(self) -> list[str]:
        return [k[:-2] for k in self.factors if k.endswith(".A")]

    @classmethod
    def init(
        cls,
        base: Mapping[str, np.ndarray],
        targets: Sequence[str],
        rng: Rng,
        rank: int = 64,
        alpha: float = 128.0,
    ) -> "LoRAAdapter":
        factors = {}
        for name in targets:
            if name not in base:
                raise KeyError(f"LoRA target {name!r} is not a base parameter")
            out_dim, in_dim = base[name].shape
            factors[f"{name}.A"] = np.zeros((out_dim, rank), dtype=base[name].dtype)
            factors[f"{name}.B"] = rng.normal((rank, in_dim), 1.0 / math.sqrt(in_dim), dtype=base[name].dtype)
        return cls(factors, rank, alpha)

    def copy(self) -> "LoRAAdapter":
        return LoRAAdapter({k: v.copy() for k, v in self.factors.items()}, self.rank, self.alpha)


def lora_apply(base: Mapping, adapter: LoRAAdapter | None, enabled: bool = True, factors: Mapping | None = None) -> dict:
    """Effective parameters W + (alpha / rank) A B on every target.

    ``factors`` may supply tensors for A/B (for differentiation); by default
    the adapter's arrays are used.  Disabled adapters return ``base`` entries
    untouched.
    """
    out = dict(base)
    if adapter is None or not enabled:
        return out
    fac = factors if factors is not None else adapter.factors
    for name in adapter.targets:
        a, b = fac[f"{name}.A"], fac[f"{name}.B"]
        w = base[name]
        if tuple(w.shape) != (a.shape[0], b.shape[1]):
            raise ShapeError(f"LoRA factors for {name}: {a.shape} x {b.shape} vs weight {w.shape}")
        if isinstance(w, Tensor) or isinstance(a, Tensor) or isinstance(b, Tensor):
            out[name] = nx.as_tensor(w) + nx.matmul(a, b, tag="lora") * adapter.scale
        else:
            out[name] = w + adapter.scale * (a @ b)
    return out


def lora_merge(base: Mapping[str, np.ndarray], adapter: LoRAAdapter) -> dict[str, np.ndarray]:
    """New arrays with the adapter folded into the base weights."""
    merged = {k: np.array(v, copy=True) for k, v in base.items()}
    for name in adapter.targets:
        a, b = adapter.factors[f"{name}.A"], adapter.factors[f"{name}.B"]
        if merged[name].shape != (a.shape[0], b.shape[1]):
            raise ShapeError(f"LoRA factors for {name} do not match {merged[name].shape}")
        merged[name] += (adapter.scale * (a.astype(np.float64) @ b.astype(np.float64))).astype(merged[name].dtype)
    return merged


# ---------------------------------------------------------------------------
# velocity models


class AnalyticTeacher:
    """Exact mixture velocity.  Label i < K conditions on component i; label K is the null condition."""

    def __init__(self, spec: GMMSpec):
        self.spec = spec
        self.null_label = spec.n_components

    def _component(self, i: int) -> GMMSpec:
        return GMMSpec((1.0,), self.spec.means[i : i + 1], (self.spec.variances[i],), self.spec.shape)

    def __call__(self, x, t, cond=None) -> np.ndarray:
        x = np.asarray(x.data if isinstance(x, Tensor) else x)
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (n,))
        labels = np.full(n, self.null_label) if cond is None else np.asarray(cond).reshape(-1)
        out = np.empty_like(x)
        for lab in np.unique(labels):
            sel = labels == lab
            spec = self.spec if lab == self.null_label else self._component(int(lab))
            out[sel] = analytic_velocity(spec, x[sel], t[sel], dtype=x.dtype)
        return out


class DiTVelocity:
    """A width-resolved DiT (base arrays plus an optional LoRA) as a velocity field."""

    def __init__(self, cfg: ModelConfig, params: Mapping[str, np.ndarray], width: float = 1.0,
                 lora: LoRAAdapter | None = None, lora_enabled: bool = True):
        self.cfg = cfg
        self.width = cfg.check_width(width)
        self.base = params  # width-resolved view
        self.lora = lora
        self.lora_enabled = lora_enabled
        self.null_label = cfg.num_classes

    @classmethod
    def from_store(cls, cfg: ModelConfig, store, width: float = 1.0, **kw) -> "DiTVelocity":
        return cls(cfg, slice_parameters(store, cfg, width), width, **kw)

    def with_lora(self, enabled: bool) -> "DiTVelocity":
        return DiTVelocity(self.cfg, self.base, self.width, self.lora, enabled)

    def tensors(self, factors: Mapping | None = None) -> dict:
        return lora_apply(as_tensors(self.base), self.lora, self.lora_enabled, factors)

    def forward(self, x, t, cond, factors: Mapping | None = None, return_features: bool = False):
        return dit_forward(self.tensors(factors), self.cfg, x, t, cond, self.width, return_features=return_features)

    def __call__(self, x, t, cond=None):
        if cond is None:
            cond = np.full(x.shape[0], self.null_label)
        return self.forward(x, t, cond).data


# ---------------------------------------------------------------------------
# roles and objectives


@dataclass
class DistillConfig:
    guidance: float = 4.0
    shift: float = 3.0
    steps: int = 4
    tau_range: tuple[float, float] = TAU_RANGE
    w_out: float = 1.0
    w_feat: float = 1.0
    student_t: str = "grid"  # "grid" (shifted few-step knots) or "uniform"
    normalize_dmd: bool = False
    lr_student: float = 1e-4
    lr_critic: float = 1e-4
    betas: tuple[float, float] = (0.0, 0.99)


@dataclass
class DistillRoles:
    """Student, critic, teacher and few-step teacher.

    The student and critic share frozen base weights and differ only in
    their LoRA factors; the critic's factors start as a copy of the
    student's.
    """

    student: DiTVelocity
    critic: DiTVelocity
    teacher: Callable
    fewstep_teacher: Callable | None
    config: DistillConfig
    projector: FeatureProjector | None = None
    rng: Rng = field(default_factory=lambda: Rng(0, stream=11))

    def __post_init__(self):
        c = self.config
        self.opt_student = Adam(self.student.lora.factors, lr=c.lr_student, betas=c.betas)
        self.opt_critic = Adam(self.critic.lora.factors, lr=c.lr_critic, betas=c.betas)
        self.opt_proj = Adam(self.projector.params, lr=c.lr_student, betas=c.betas) if self.projector else None

    @classmethod
    def create(
        cls,
        cfg: ModelConfig,
        base: Mapping[str, np.ndarray],
        teacher: Callable,
        fewstep_teacher: Callable | None,
        config: DistillConfig | None = None,
        seed: int = 0,
        rank: int = 64,
        alpha: float = 128.0,
        width: float = 1.0,
        teacher_feature_width: int | None = None,
    ) -> "DistillRoles":
        rng = Rng(seed, stream=11)
        lora = LoRAAdapter.init(base, lora_targets(cfg), rng.spawn(12), rank, alpha)
        student = DiTVelocity(cfg, base, width, lora)
        critic = DiTVelocity(cfg, base, width, lora.copy())
        projector = None
        if teacher_feature_width is not None:
            sw = cfg.width_at(width)
            projector = FeatureProjector(sw, teacher_feature_width, rng.spawn(13), identity=sw == teacher_feature_width)
        return cls(student, critic, teacher, fewstep_teacher, config or DistillConfig(), projector, rng)

    def student_inputs(self, x0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Noised data at the few-step knots (or uniform t) fed to the student."""
        n = x0.shape[0]
        c = self.config
        if c.student_t == "grid":
            knots = shift_knots(c.steps, c.shift)[:-1]
            t = knots[self.rng.integers(0, len(knots), n)]
        elif c.student_t == "uniform":
            t = 1.0 - self.rng.uniform(0.0, 1.0, n, dtype=np.float64)
        else:
            raise ValueError(f"unknown student_t mode {c.student_t!r}")
        eps = self.rng.normal(x0.shape, 1.0, dtype=x0.dtype)
        return sample_xt(x0, eps, t).x_t, t


def _guided(teacher: Callable, x, t, cond, guidance: float) -> np.ndarray:
    x = x.data if isinstance(x, Tensor) else x
    null = getattr(teacher, "null_label", None)
    if null is None or guidance == 1.0:
        return np.asarray(teacher(x, t, cond))
    return np.asarray(cfg_velocity(teacher, x, t, cond, guidance))


def dmd_student_loss(
    x0_hat: Tensor,
    critic: Callable,
    teacher: Callable,
    tau,
    eps,
    cond=None,
    guidance: float = 4.0,
    normalize: bool = False,
) -> tuple[Tensor, np.ndarray]:
    """Surrogate whose gradient through ``x0_hat`` is the DMD gradient.

    Both scores are expressed as x_0 predictions f = x_tau - tau v.  The
    difference f_critic - f_teacher is detached, so minimizing
    mean<diff, x0_hat> moves x0_hat toward the teacher's prediction and away
    from the critic's.  Returns the surrogate and the detached difference.
    """
    x0_hat = nx.as_tensor(x0_hat)
    x_tau = rediffuse(x0_hat.data, tau, eps)
    v_c = np.asarray(critic(x_tau, tau, cond))
    v_r = _guided(teacher, x_tau, tau, cond, guidance)
    f_c = predict_x0(x_tau, tau, v_c)
    f_r = predict_x0(x_tau, tau, v_r)
    diff = (f_c - f_r).astype(x0_hat.dtype)
    if normalize:
        axes = tuple(range(1, diff.ndim))
        w = np.mean(np.abs(x0_hat.data - f_r), axis=axes, keepdims=True)
        diff = diff / np.maximum(w, 1e-8)
    if not np.all(np.isfinite(diff)):
        raise NumericalError("non-finite DMD direction")
    surrogate = (x0_hat * nx.stop_gradient(nx.as_tensor(diff))).mean()
    return surrogate, diff


def critic_update(roles: DistillRoles, x0_hat: np.ndarray, cond=None) -> float:
    """One flow-matching step of the critic on detached student predictions."""
    x0_hat = np.asarray(x0_hat.data if isinstance(x0_hat, Tensor) else x0_hat)
    n = x0_hat.shape[0]
    eps = roles.rng.normal(x0_hat.shape, 1.0, dtype=x0_hat.dtype)
    t = 1.0 - roles.rng.uniform(0.0, 1.0, n, dtype=np.float64)
    batch = sample_xt(x0_hat, eps, t)
    cond = np.full(n, roles.critic.null_label) if cond is None else cond
    leaves = as_tensors(roles.critic.lora.factors, requires_grad=True, prefix="critic/")
    with Tape() as tape:
        v = roles.critic.forward(batch.x_t, batch.t, cond, factors=leaves)
        loss = mse(v, batch.target)
    grads = nx.backward(tape, loss, {f"critic/{k}": leaf for k, leaf in leaves.items()})
    value = float(loss.item())
    if not math.isfinite(value):
        raise NumericalError("non-finite critic loss")
    roles.opt_critic.step({k[len("critic/"):]: g for k, g in grads.items()})
    return value


@dataclass
class DistillReport:
    iteration: int
    role: str
    loss_dmd: float = float("nan")
    loss_out: float = float("nan")
    loss_feat: float = float("nan")
    critic_loss: float = float("nan")
    mmd: float = float("nan")
    rejected: bool = False

    def row(self) -> dict:
        return {
            "iteration": self.iteration,
            "role": self.role,
            "loss_dmd": self.loss_dmd,
            "loss_out": self.loss_out,
            "loss_feat": self.loss_feat,
            "critic_loss": self.critic_loss,
            "mmd": self.mmd,
        }


def student_objective(roles: DistillRoles, x0: np.ndarray, cond=None):
    """Tape-recorded knowledge-guided DMD objective; returns (tape, total, parts, leaves)."""
    c = roles.config
    n = x0.shape[0]
    cond = np.full(n, roles.student.null_label) if cond is None else cond
    x_t, t = roles.student_inputs(x0)
    tau = roles.rng.uniform(c.tau_range[0], c.tau_range[1], n, dtype=np.float64)
    eps = roles.rng.normal(x0.shape, 1.0, dtype=x0.dtype)
    leaves = as_tensors(roles.student.lora.factors, requires_grad=True, prefix="student/")
    proj_leaves = as_tensors(roles.projector.params, requires_grad=True, prefix="proj/") if roles.projector else None
    use_feat = c.w_feat > 0 and roles.projector is not None and isinstance(roles.fewstep_teacher, DiTVelocity)
    with Tape() as tape:
        v, feat = roles.student.forward(x_t, t, cond, factors=leaves, return_features=True)
        x0_hat = predict_x0(x_t, t, v)
        l_dmd, _ = dmd_student_loss(x0_hat, roles.critic, roles.teacher, tau, eps, cond, c.guidance, c.normalize_dmd)
        total = l_dmd
        parts = {"loss_dmd": l_dmd}
        if roles.fewstep_teacher is not None and c.w_out > 0:
            if use_feat:
                tv, tfeat = roles.fewstep_teacher.forward(x_t, t, cond, return_features=True)
                tv, tfeat = tv.data, tfeat.data
            else:
                tv = np.asarray(roles.fewstep_teacher(x_t, t, cond))
            l_out = output_kd_loss(tv, v)
            total = total + l_out * c.w_out
            parts["loss_out"] = l_out
            if use_feat:
                l_feat = feature_kd_loss(tfeat, feat, roles.projector, proj_leaves)
                total = total + l_feat * c.w_feat
                parts["loss_feat"] = l_feat
    return tape, total, parts, leaves, proj_leaves, x0_hat


def kdmd_step(roles: DistillRoles, x0: np.ndarray, iteration: int, cond=None) -> DistillReport:
    """Student update every ``STUDENT_EVERY`` iterations, critic update otherwise."""
    if iteration % STUDENT_EVERY == 0:
        report = DistillReport(iteration, "student")
        try:
            tape, total, parts, leaves, proj_leaves, _ = student_objective(roles, x0, cond)
            wrt = {f"student/{k}": v for k, v in leaves.items()}
            if proj_leaves is not None and "loss_feat" in parts:
                wrt.update({f"proj/{k}": v for k, v in proj_leaves.items()})
            grads = nx.backward(tape, total, wrt)
            values = {k: float(p.item()) for k, p in parts.items()}
            if not all(math.isfinite(x) for x in values.values()) or not all(
                np.all(np.isfinite(g)) for g in grads.values()
            ):
                raise NumericalError("non-finite student objective")
        except NumericalError as exc:
            log.warning("student step %d rejected: %s", iteration, exc)
            report.rejected = True
            return report
        roles.opt_student.step({k[8:]: g for k, g in grads.items() if k.startswith("student/")})
        if roles.opt_proj is not None and any(k.startswith("proj/") for k in grads):
            roles.opt_proj.step({k[5:]: g for k, g in grads.items() if k.startswith("proj/")})
        report.loss_dmd = values["loss_dmd"]
        report.loss_out = values.get("loss_out", float("nan"))
        report.loss_feat = values.get("loss_feat", float("nan"))
        return report
    report = DistillReport(iteration, "critic")
    x_t, t = roles.student_inputs(x0)
    n = x0.shape[0]
    cnd = np.full(n, roles.student.null_label) if cond is None else cond
    x0_hat = predict_x0(x_t, t, roles.student(x_t, t, cnd))
    try:
        report.critic_loss = critic_update(roles, x0_hat, cond)
    except NumericalError as exc:
        log.warning("critic step %d rejected: %s", iteration, exc)
        report.rejected = True
    return report


# ---------------------------------------------------------------------------
# sampling


def shift_knots(n: int, shift: float = 1.0) -> np.ndarray:
    """n + 1 knots from 1 to 0: uniform 1 - i/n mapped by s t / (1 + (s - 1) t)."""
    if n < 1:
        raise ValueError("the sampler needs at least one step")
    if shift < 1.0:
        raise ValueError("shift must be at least 1")
    t = 1.0 - np.arange(n + 1, dtype=np.float64) / n
    t[-1] = 0.0
    return shift * t / (1.0 + (shift - 1.0) * t)


def few_step_sample(
    model: Callable,
    steps: int,
    shift: float,
    cond,
    guidance: float = 1.0,
    noise: np.ndarray | None = None,
    rng: Rng | None = None,
    shape: tuple[int, ...] | None = None,
    n: int | None = None,
) -> np.ndarray:
    """Euler integration of the velocity field from t = 1 (noise) to t = 0."""
    knots = shift_knots(steps, shift)
    if noise is None:
        if rng is None or shape is None or n is None:
            raise ValueError("provide either noise or (rng, shape, n)")
        noise = rng.normal((n,) + tuple(shape), 1.0)
    x = np.array(noise, copy=True)
    if cond is None:
        null = getattr(model, "null_label", None)
        cond = None if null is None else np.full(x.shape[0], null)
    for i in range(steps):
        t = np.full(x.shape[0], knots[i])
        v = _guided(model, x, t, cond, guidance)
        x = x - (knots[i] - knots[i + 1]) * v.astype(x.dtype)
    return x
