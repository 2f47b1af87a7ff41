import math

import numpy as np
import pytest

from elasticdit.numerics import Rng, ShapeError
from elasticdit.oracle import (
    GMMSpec,
    analytic_velocity,
    gmm_sample,
    irreducible_loss,
    mmd_distance,
    posterior,
    posterior_mean,
)


def two_d_spec() -> GMMSpec:
    return GMMSpec((0.3, 0.7), np.array([[1.5, -0.5], [-1.0, 1.0]]), (0.2, 0.5))


def test_spec_validation():
    with pytest.raises(ValueError):
        GMMSpec((0.5, 0.6), np.zeros((2, 2)), (1.0, 1.0))
    with pytest.raises(ValueError):
        GMMSpec((1.0,), np.zeros((1, 2)), (-1.0,))
    with pytest.raises(ShapeError):
        GMMSpec((0.5, 0.5), np.zeros((3, 2)), (1.0, 1.0))
    with pytest.raises(ValueError):
        GMMSpec((), np.zeros((0, 2)), ())
    spec = GMMSpec.default()
    assert spec.shape == (2, 4, 4) and spec.n_components == 2
    np.testing.assert_allclose(spec.mean, 0.0)
    assert GMMSpec.from_dict(spec.to_dict()).to_dict() == spec.to_dict()


def test_sample_single_point_mass():
    spec = GMMSpec.isotropic(np.array([0.25, -2.0, 3.0]), 0.0)
    x = gmm_sample(spec, 7, Rng(0))
    np.testing.assert_array_equal(x, np.tile([0.25, -2.0, 3.0], (7, 1)))
    with pytest.raises(ValueError):
        gmm_sample(spec, 0, Rng(0))


def test_sample_weights_and_mean():
    spec = two_d_spec()
    n = 100_000
    x, labels = gmm_sample(spec, n, Rng(1), return_labels=True)
    for k, w in enumerate(spec.weights):
        count = np.sum(labels == k)
        assert abs(count - n * w) <= 3 * math.sqrt(n * w * (1 - w))
    unit = gmm_sample(GMMSpec.isotropic(np.array([0.5, -0.5]), 1.0), 40_000, Rng(2))
    assert np.all(np.abs(unit.mean(0) - [0.5, -0.5]) <= 4 / math.sqrt(40_000))


def test_standard_normal_velocity_vanishes_at_half():
    spec = GMMSpec.isotropic(np.zeros(3), 1.0)
    x = Rng(3).normal((10, 3), dtype=np.float64) * 3
    np.testing.assert_allclose(analytic_velocity(spec, x, 0.5), 0.0, atol=1e-14)


def test_velocity_at_t1_single_component():
    mu = np.array([0.4, -1.1])
    spec = GMMSpec.isotropic(mu, 0.3)
    x = Rng(4).normal((5, 2), dtype=np.float64)
    np.testing.assert_allclose(analytic_velocity(spec, x, 1.0), x - mu, atol=1e-14)


def test_velocity_rejects_t0():
    with pytest.raises(ValueError):
        analytic_velocity(two_d_spec(), np.zeros((1, 2)), 0.0)


def test_velocity_matches_monte_carlo_conditional_mean():
    """E[eps - x0 | x_t] by importance weighting one million prior draws."""
    spec = two_d_spec()
    rng = Rng(5)
    n = 1_000_000
    x0 = gmm_sample(spec, n, rng)
    for x_t, t in ((np.array([0.3, 0.2]), 0.6), (np.array([1.0, -0.4]), 0.35)):
        logw = -0.5 * np.sum((x_t - (1 - t) * x0) ** 2, axis=1) / t**2
        w = np.exp(logw - logw.max())
        w /= w.sum()
        eps = (x_t - (1 - t) * x0) / t
        target = eps - x0
        est = w @ target
        ess = 1.0 / np.sum(w**2)
        se = np.sqrt((w @ (target - est) ** 2) / ess)
        v = analytic_velocity(spec, x_t[None], t)[0]
        assert np.all(np.abs(est - v) <= 3 * se + 1e-12), (est, v, se)


def test_responsibilities_sum_to_one():
    spec = GMMSpec.default()
    rng = Rng(6)
    x = rng.normal((64, 2, 4, 4), dtype=np.float64) * 4
    for t in (1e-4, 0.1, 0.5, 0.99, 1.0):
        resp, _ = posterior(spec, x, t)
        np.testing.assert_allclose(resp.sum(1), 1.0, atol=1e-12)
    assert posterior_mean(spec, x, 0.5).shape == (64, 32)


def test_irreducible_loss_closed_forms():
    point = GMMSpec.isotropic(np.array([1.0, -1.0]), 0.0)
    val, se = irreducible_loss(point, [0.2, 0.5, 0.9], 3000, Rng(7))
    assert val <= 1e-20 and se <= 1e-20
    normal = GMMSpec.isotropic(np.zeros(4), 1.0)
    val, se = irreducible_loss(normal, [0.5], 20_000, Rng(8))
    assert abs(val - 2.0) <= 3 * se


def test_irreducible_loss_stable_across_seeds():
    spec = GMMSpec.default()
    a, sa = irreducible_loss(spec, None, 20_000, Rng(9))
    b, sb = irreducible_loss(spec, None, 20_000, Rng(10))
    assert sa / a <= 0.02
    assert abs(a - b) <= 4 * math.hypot(sa, sb)


def test_mmd_identical_sets():
    a = Rng(11).normal((200, 3), dtype=np.float64)
    assert mmd_distance(a, a, unbiased=False) == 0.0
    assert abs(mmd_distance(a, a)) <= 1e-12


def test_mmd_separated_gaussians():
    rng = Rng(12)
    a = rng.normal((400, 2), dtype=np.float64)
    b = rng.normal((400, 2), dtype=np.float64) + 10.0
    assert mmd_distance(a, b) > 0.5


def test_mmd_permutation_null():
    rng = Rng(13)
    pool = gmm_sample(two_d_spec(), 400, rng)
    observed = mmd_distance(pool[:200], pool[200:])
    perms = []
    for _ in range(200):
        idx = rng.gen.permutation(400)
        perms.append(mmd_distance(pool[idx[:200]], pool[idx[200:]]))
    p_value = np.mean(np.array(perms) >= observed)
    assert p_value > 0.05


def test_mmd_errors():
    with pytest.raises(ValueError):
        mmd_distance(np.zeros((0, 2)), np.zeros((3, 2)))
    with pytest.raises(ShapeError):
        mmd_distance(np.zeros((3, 2)), np.zeros((3, 4)))
    with pytest.raises(ValueError):
        mmd_distance(np.zeros((1, 2)), np.zeros((3, 2)))
