"""Flow-matching and knowledge-distillation objectives.

Forward process: x_t = (1 - t) x_0 + t eps, target velocity eps - x_0,
sigma_t = t.  All squared errors are means over batch and elements.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .numerics import NumericalError, ShapeError, Tensor

__all__ = [
    "DiffusionSample",
    "sample_xt",
    "mse",
    "flow_matching_loss",
    "output_kd_loss",
    "FeatureProjector",
    "feature_kd_loss",
    "ConstantSchedule",
    "PiecewiseLinearSchedule",
    "timestep_scaled_kd",
]


@dataclass(frozen=True)
class DiffusionSample:
    x0: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    target: np.ndarray
    cond: np.ndarray | None = None

    @property
    def sigma(self) -> np.ndarray:
        return self.t

    def __len__(self) -> int:
        return self.x0.shape[0]


def _per_sample_t(t, n: int, dtype) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(n, float(t))
    t = t.reshape(-1)
    if t.shape[0] != n:
        raise ShapeError(f"{t.shape[0]} timesteps for a batch of {n}")
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("timesteps must lie in [0, 1]")
    return t.astype(dtype)


def _bcast(t: np.ndarray, ndim: int) -> np.ndarray:
    return t.reshape((-1,) + (1,) * (ndim - 1))


def sample_xt(x0, eps, t, cond=None) -> DiffusionSample:
    x0 = np.asarray(x0)
    eps = np.asarray(eps, dtype=x0.dtype)
    if x0.shape != eps.shape:
        raise ShapeError(f"x_0 {x0.shape} and noise {eps.shape} differ")
    if x0.ndim == 0:
        x0, eps = x0.reshape(1), eps.reshape(1)
    t = _per_sample_t(t, x0.shape[0], x0.dtype)
    tb = _bcast(t, x0.ndim)
    x_t = (1 - tb) * x0 + tb * eps
    return DiffusionSample(x0, eps, t, x_t, eps - x0, cond)


def mse(pred, target, per_sample: bool = False) -> Tensor:
    """Mean squared error; ``per_sample`` keeps the leading batch axis."""
    pred = nx.as_tensor(pred)
    target_t = nx.as_tensor(target)
    if pred.shape != target_t.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target_t.shape}")
    if not np.all(np.isfinite(pred.data)):
        raise NumericalError("non-finite prediction")
    err = nx.square(pred - target_t)
    if per_sample:
        axes = tuple(range(1, err.ndim))
        return err.mean(axis=axes) if axes else err
    return err.mean()


def flow_matching_loss(predict, sample: DiffusionSample, per_sample: bool = False) -> Tensor:
    """||(eps - x_0) - v(x_t, t)||^2.

    ``predict`` is a precomputed velocity or a callable ``(x_t, t) -> velocity``.
    """
    if len(sample) == 0:
        raise ValueError("empty batch")
    v = predict(sample.x_t, sample.t) if callable(predict) else predict
    return mse(v, sample.target, per_sample)


def output_kd_loss(teacher_v, student_v, per_sample: bool = False) -> Tensor:
    """Student velocity regressed onto the teacher's (teacher side carries no gradient)."""
    teacher = nx.stop_gradient(nx.as_tensor(teacher_v))
    student = nx.as_tensor(student_v)
    if teacher.shape != student.shape:
        raise ShapeError(f"teacher {teacher.shape} vs student {student.shape}")
    return mse(student, teacher, per_sample)


class FeatureProjector:
    """Channel-wise affine map from student feature width to teacher feature width."""

    def __init__(self, student_width: int, teacher_width: int, rng: nx.Rng | None = None, identity: bool = False):
        dtype = nx.default_dtype()
        if identity:
            if student_width != teacher_width:
                raise ShapeError("identity projector needs equal widths")
            w = np.eye(teacher_width, dtype=dtype)
        else:
            rng = rng or nx.Rng(0)
            bound = np.sqrt(6.0 / (student_width + teacher_width))
            w = rng.uniform(-bound, bound, (teacher_width, student_width))
        self.params = {"proj.w": w, "proj.b": np.zeros(teacher_width, dtype)}

    @property
    def out_width(self) -> int:
        return self.params["proj.w"].shape[0]

    def __call__(self, feat, params: Mapping[str, Tensor] | None = None) -> Tensor:
        p = params if params is not None else self.params
        return nx.linear(nx.as_tensor(feat), p["proj.w"], p["proj.b"], tag="proj")


def feature_kd_loss(teacher_feat, student_feat, projector, params=None, per_sample: bool = False) -> Tensor:
    """||f_teacher - phi(f_student)||^2 on final-block features."""
    projected = projector(student_feat, params) if isinstance(projector, FeatureProjector) else projector(student_feat)
    teacher = nx.stop_gradient(nx.as_tensor(teacher_feat))
    if projected.shape != teacher.shape:
        raise ShapeError(f"projected student features {projected.shape} vs teacher {teacher.shape}")
    return mse(projected, teacher, per_sample)


class ConstantSchedule:
    def __init__(self, w: float = 0.5):
        if not 0.0 <= w <= 1.0:
            raise ValueError(f"weight {w} outside [0, 1]")
        self.w = float(w)

    def __call__(self, t) -> np.ndarray:
        return np.full(np.shape(t), self.w)

    def __repr__(self) -> str:
        return f"ConstantSchedule({self.w})"


class PiecewiseLinearSchedule:
    """w(t) interpolated from (t_knot, w_knot) pairs; clamped outside the table."""

    def __init__(self, knots: Sequence[float], values: Sequence[float]):
        knots = np.asarray(knots, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        if knots.shape != values.shape or knots.ndim != 1 or len(knots) < 1:
            raise ValueError("knots and values must be equal-length 1-D sequences")
        if np.any(np.diff(knots) <= 0):
            raise ValueError("knots must increase strictly")
        if np.any(values < 0) or np.any(values > 1):
            raise ValueError("schedule values must lie in [0, 1]")
        self.knots, self.values = knots, values

    def __call__(self, t) -> np.ndarray:
        return np.interp(np.asarray(t, dtype=np.float64), self.knots, self.values)


def timestep_scaled_kd(
    l_diff: Tensor, l_out: Tensor, t, schedule: Callable, l_feat: Tensor | None = None
) -> Tensor:
    """Batch mean of w(t) L_out + (1 - w(t)) L_diff per sample, plus L_feat."""
    l_diff, l_out = nx.as_tensor(l_diff), nx.as_tensor(l_out)
    if l_diff.shape != l_out.shape:
        raise ShapeError(f"per-sample losses differ in shape: {l_diff.shape} vs {l_out.shape}")
    w = np.asarray(schedule(np.asarray(t)), dtype=np.float64)
    if np.any(w < 0.0) or np.any(w > 1.0):
        raise ValueError("schedule produced weights outside [0, 1]")
    w = np.broadcast_to(w, l_diff.shape).astype(l_diff.dtype)
    total = (l_out * w + l_diff * (1.0 - w)).mean()
    if l_feat is not None:
        total = total + l_feat
    return total
