"""Closed-form Gaussian-mixture machinery.

Data x_0 ~ sum_i pi_i N(mu_i, v_i I) in a flattened latent space.  Under
x_t = (1 - t) x_0 + t eps the marginal of component i is
N((1 - t) mu_i, ((1 - t)^2 v_i + t^2) I), so the posterior mean E[x_0 | x_t]
and the optimal velocity (x_t - E[x_0 | x_t]) / t are available exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import Rng, ShapeError

__all__ = [
    "GMMSpec",
    "gmm_sample",
    "posterior",
    "posterior_mean",
    "analytic_velocity",
    "irreducible_loss",
    "mmd_distance",
    "median_bandwidth",
]


@dataclass(frozen=True)
class GMMSpec:
    weights: tuple[float, ...]
    means: np.ndarray  # (K, D) flattened
    variances: tuple[float, ...]
    shape: tuple[int, ...] | None = None  # latent shape of one sample, e.g. (C, H, W)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        var = np.asarray(self.variances, dtype=np.float64)
        if w.ndim != 1 or len(w) < 1:
            raise ValueError("a mixture needs at least one component")
        if np.any(w < 0) or not math.isclose(w.sum(), 1.0, rel_tol=0, abs_tol=1e-9):
            raise ValueError(f"weights must be non-negative and sum to 1, got {w.tolist()}")
        if means.shape[0] != len(w) or var.shape != w.shape:
            raise ShapeError(f"{len(w)} weights, {means.shape[0]} means, {var.shape[0]} variances")
        if np.any(var < 0):
            raise ValueError("variances must be non-negative")
        shape = tuple(self.shape) if self.shape is not None else (means.shape[1],)
        if math.prod(shape) != means.shape[1]:
            raise ShapeError(f"sample shape {shape} does not hold {means.shape[1]} values")
        object.__setattr__(self, "weights", tuple(w.tolist()))
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", tuple(var.tolist()))
        object.__setattr__(self, "shape", shape)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def mean(self) -> np.ndarray:
        return np.asarray(self.weights) @ self.means

    @classmethod
    def default(cls, channels: int = 2, size: int = 4, separation: float = 0.8, variance: float = 0.1) -> "GMMSpec":
        """Two equally weighted components at +/- a checkerboard pattern."""
        c, h, w = np.meshgrid(np.arange(channels), np.arange(size), np.arange(size), indexing="ij")
        mu = separation * np.where((c + h + w) % 2 == 0, 1.0, -1.0).reshape(-1)
        return cls((0.5, 0.5), np.stack([mu, -mu]), (variance, variance), (channels, size, size))

    @classmethod
    def isotropic(cls, mean, variance: float = 1.0) -> "GMMSpec":
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        return cls((1.0,), mean[None], (variance,), mean.shape)

    def to_dict(self) -> dict:
        return {
            "weights": list(self.weights),
            "means": self.means.tolist(),
            "variances": list(self.variances),
            "shape": list(self.shape),
        }

    @classmethod
    def from_dict(cls, d) -> "GMMSpec":
        if isinstance(d, str):
            d = json.loads(d)
        return cls(tuple(d["weights"]), np.asarray(d["means"]), tuple(d["variances"]), tuple(d["shape"]))


def gmm_sample(spec: GMMSpec, n: int, rng: Rng, return_labels: bool = False, dtype=np.float64):
    """``n`` i.i.d. draws shaped ``(n, *spec.shape)``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    labels = rng.gen.choice(spec.n_components, size=n, p=np.asarray(spec.weights))
    std = np.sqrt(np.asarray(spec.variances))[labels]
    noise = rng.normal((n, spec.dim), 1.0, dtype=np.float64)
    x = (spec.means[labels] + std[:, None] * noise).reshape((n,) + spec.shape).astype(dtype)
    return (x, labels) if return_labels else x


def _flat(spec: GMMSpec, x_t) -> np.ndarray:
    x = np.asarray(x_t, dtype=np.float64)
    if x.shape[-len(spec.shape):] != spec.shape and x.shape[-1] != spec.dim:
        raise ShapeError(f"samples {x.shape} do not end in the latent shape {spec.shape}")
    return x.reshape(-1, spec.dim)


def _check_t(t, n: int) -> np.ndarray:
    t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (n,))
    if np.any(t <= 0.0) or np.any(t > 1.0):
        raise ValueError("t must lie in (0, 1]; at t = 0 use x_t = x_0 directly")
    return t


def posterior(spec: GMMSpec, x_t, t) -> tuple[np.ndarray, np.ndarray]:
    """Responsibilities ``(n, K)`` and per-component posterior means ``(n, K, D)``."""
    x = _flat(spec, x_t)
    t = _check_t(t, x.shape[0])[:, None]
    a = 1.0 - t  # signal coefficient
    var = np.asarray(spec.variances)[None, :]
    total = a**2 * var + t**2  # (n, K)
    diff = x[:, None, :] - a[:, :, None] * spec.means[None]
    sq = np.sum(diff**2, axis=-1)
    logp = np.log(np.maximum(np.asarray(spec.weights), 1e-300))[None] - 0.5 * (
        sq / total + spec.dim * np.log(2.0 * np.pi * total)
    )
    resp = np.exp(logp - np.logaddexp.reduce(logp, axis=1, keepdims=True))
    gain = (a * var / total)[:, :, None]
    means = spec.means[None] + gain * diff
    return resp, means


def posterior_mean(spec: GMMSpec, x_t, t) -> np.ndarray:
    resp, means = posterior(spec, x_t, t)
    return np.einsum("nk,nkd->nd", resp, means)


def analytic_velocity(spec: GMMSpec, x_t, t, dtype=None) -> np.ndarray:
    """Optimal flow-matching velocity, shaped like ``x_t``."""
    x_t = np.asarray(x_t)
    x = _flat(spec, x_t)
    tt = _check_t(t, x.shape[0])[:, None]
    v = (x - posterior_mean(spec, x_t, t)) / tt
    return v.reshape(x_t.shape).astype(dtype or (x_t.dtype if x_t.dtype.kind == "f" else np.float64))


def irreducible_loss(
    spec: GMMSpec, t_grid: Sequence[float] | None, n: int, rng: Rng, chunk: int = 20000
) -> tuple[float, float]:
    """Monte-Carlo minimum of the flow-matching loss: (mean, standard error).

    ``t_grid`` lists the timesteps averaged over (equal weight); ``None``
    draws t uniformly from (0, 1].  The per-sample loss is averaged over
    latent elements, matching :func:`elasticdit.losses.mse`.
    """
    vals = []
    done = 0
    while done < n:
        m = min(chunk, n - done)
        x0 = gmm_sample(spec, m, rng)
        eps = rng.normal(x0.shape, 1.0, dtype=np.float64)
        if t_grid is None:
            t = 1.0 - rng.uniform(0.0, 1.0, m, dtype=np.float64)
        else:
            grid = np.asarray(t_grid, dtype=np.float64)
            t = grid[np.arange(done, done + m) % len(grid)]
        tb = t.reshape((-1,) + (1,) * len(spec.shape))
        x_t = (1 - tb) * x0 + tb * eps
        v = analytic_velocity(spec, x_t, t)
        vals.append(np.mean(((eps - x0) - v).reshape(m, -1) ** 2, axis=1))
        done += m
    per = np.concatenate(vals)
    return float(per.mean()), float(per.std(ddof=1) / math.sqrt(len(per))) if len(per) > 1 else 0.0


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = np.sum(a**2, 1)[:, None] + np.sum(b**2, 1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def median_bandwidth(a, b) -> float:
    """Median pairwise Euclidean distance over the pooled sample."""
    z = np.concatenate([np.asarray(a, np.float64).reshape(len(a), -1), np.asarray(b, np.float64).reshape(len(b), -1)])
    d = _sqdist(z, z)
    iu = np.triu_indices(len(z), k=1)
    med = float(np.sqrt(np.median(d[iu]))) if len(iu[0]) else 0.0
    return med if med > 0 else 1.0


def mmd_distance(samples_a, samples_b, bandwidth: float | None = None, unbiased: bool = True) -> float:
    """Gaussian-kernel MMD^2 with kernel exp(-||x - y||^2 / (2 h^2))."""
    a = np.asarray(samples_a, np.float64)
    b = np.asarray(samples_b, np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both sample sets must be non-empty")
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"sample dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    h = median_bandwidth(a, b) if bandwidth is None else float(bandwidth)
    kaa = np.exp(-_sqdist(a, a) / (2 * h * h))
    kbb = np.exp(-_sqdist(b, b) / (2 * h * h))
    kab = np.exp(-_sqdist(a, b) / (2 * h * h))
    m, n = len(a), len(b)
    if unbiased:
        if m < 2 or n < 2:
            raise ValueError("the unbiased estimator needs at least two samples per set")
        xx = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
        yy = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
        # equal sizes: paired U-statistic, which also drops the i == j cross terms
        xy = (kab.sum() - np.trace(kab)) / (m * (m - 1)) if m == n else kab.mean()
    else:
        xx, yy, xy = kaa.mean(), kbb.mean(), kab.mean()
    return float(xx + yy - 2.0 * xy)
