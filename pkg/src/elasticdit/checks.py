"""Self-contained oracle-equivalence and gradient checks (run by ``elasticdit oracle-check``).

Each check compares a fast implementation against an independent reference
(dense masked attention, central differences, closed-form Gaussian
posteriors, executed operation counts) and reports the worst discrepancy.
"""

from __future__ import annotations

import math
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import _kernels
from . import numerics as nx
from .attention import AttentionConfig, bna, dense_attention, neighborhood_mask
from .elastic import slice_parameters
from .model import ModelConfig, StageLayout, as_tensors, dit_forward, init_params

__all__ = ["CheckResult", "CHECKS", "run_all", "tiny_config"]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def tiny_config(**kw) -> ModelConfig:
    """A small two-width architecture for exhaustive checks."""
    base = dict(
        in_channels=2,
        latent_size=4,
        patch_size=1,
        layout=StageLayout(1, 2, 1, 16, 2, 2),
        attention=AttentionConfig(2, 2, 2, 1),
        cond_dim=8,
        cond_len=2,
        num_classes=2,
        t_freq_dim=8,
        widths=(0.5, 1.0),
    )
    base.update(kw)
    return ModelConfig(**base)


def _qkv(rng: nx.Rng, b: int, hq: int, hkv: int, n: int, d: int, dtype):
    return (rng.normal((b, hq, n, d), dtype=dtype), rng.normal((b, hkv, n, d), dtype=dtype),
            rng.normal((b, hkv, n, d), dtype=dtype))


def check_bna_forward(seed: int) -> CheckResult:
    worst = 0.0
    rng = nx.Rng(seed, stream=71)
    for boundary in ("shift", "clip"):
        for hq, hkv in ((4, 4), (4, 2), (4, 1)):
            for nb, r in ((4, 1), (8, 2), (2, 0)):
                q, k, v = _qkv(rng, 2, hq, hkv, 32, 8, np.float64)
                a = bna(q, k, v, nb, r, boundary).data
                ref = dense_attention(q, k, v, neighborhood_mask(32, nb, r, boundary)).data
                worst = max(worst, float(np.max(np.abs(a - ref))))
    return CheckResult("bna_forward_vs_dense", worst <= 1e-12, f"max abs diff {worst:.2e} (float64)")


def check_bna_gradient(seed: int) -> CheckResult:
    rng = nx.Rng(seed, stream=72)
    worst = 0.0
    for boundary in ("shift", "clip"):
        q, k, v = _qkv(rng, 1, 4, 2, 16, 4, np.float64)
        w = rng.normal(q.shape, dtype=np.float64)
        grads = []
        for fn in (lambda a, b, c: bna(a, b, c, 4, 1, boundary),
                   lambda a, b, c: dense_attention(a, b, c, neighborhood_mask(16, 4, 1, boundary))):
            leaves = {n: nx.Tensor(x, requires_grad=True, name=n) for n, x in zip("qkv", (q, k, v))}
            with nx.Tape() as tape:
                loss = nx.sum_(nx.mul(fn(leaves["q"], leaves["k"], leaves["v"]), w))
            grads.append(nx.backward(tape, loss, leaves))
        worst = max(worst, nx.rel_error(*grads))
    return CheckResult("bna_backward_vs_dense", worst <= 1e-10, f"relative error {worst:.2e}")


def check_backends(seed: int) -> CheckResult:
    if not _kernels.HAVE_NUMBA:
        return CheckResult("backend_equivalence", True, "numba unavailable; numpy backend only")
    rng = nx.Rng(seed, stream=73)
    worst = {}
    for dtype, tol in ((np.float64, 1e-12), (np.float32, 1e-5)):
        q, k, v = _qkv(rng, 1, 4, 4, 64, 8, dtype)
        g = rng.normal(q.shape, dtype=dtype)
        scale = 1.0 / math.sqrt(8)
        res = {}
        for be in ("numpy", "numba"):
            o, lse = _kernels.bna_forward(q, k, v, 8, 1, scale, True, backend=be)
            res[be] = (o, *_kernels.bna_backward(q, k, v, o, lse, g, 8, 1, scale, True, backend=be))
        err = max(float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(a)))))
                  for a, b in zip(res["numpy"], res["numba"]))
        worst[np.dtype(dtype).name] = (err, tol)
    ok = all(e <= t for e, t in worst.values())
    return CheckResult("backend_equivalence", ok, ", ".join(f"{k} {e:.1e}" for k, (e, _) in worst.items()))


def check_model_gradient(seed: int) -> CheckResult:
    """Tape gradients of a full forward pass against central differences."""
    cfg = tiny_config()
    with nx.precision("float64"):
        store = init_params(cfg, nx.Rng(seed, stream=74), random_all=True)
        rng = nx.Rng(seed, stream=75)
        x = rng.normal((2, 2, 4, 4), dtype=np.float64)
        t = np.array([0.3, 0.8])
        cond = np.array([0, 2])
        w = rng.normal((2, 2, 4, 4), dtype=np.float64)
        names = ["patch.b", "down.0.attn.gate.w", "mid.1.attn.q.b", "up.0.cross.k.w", "t.fc1.b", "final.w"]
        names = [n for n in names if n in store]

        view = slice_parameters(store, cfg, 1.0)

        def loss_value() -> float:
            return float(np.sum(dit_forward(as_tensors(view), cfg, x, t, cond, 1.0).data * w))

        leaves = as_tensors(view, requires_grad=True)
        with nx.Tape() as tape:
            loss = nx.sum_(nx.mul(dit_forward(leaves, cfg, x, t, cond, 1.0), w))
        analytic = nx.backward(tape, loss, {n: leaves[n] for n in names})
        numeric = nx.finite_diff_grad(loss_value, {n: view[n] for n in names}, h=1e-6)
    err = nx.rel_error(analytic, numeric)
    return CheckResult("model_gradient_vs_finite_diff", err <= 1e-6, f"relative error {err:.2e} over {len(names)} tensors")


def check_slicing(seed: int) -> CheckResult:
    from .elastic import materialize, subnet_forward

    cfg = ModelConfig()
    store = init_params(cfg, nx.Rng(seed, stream=76), random_all=True)
    rng = nx.Rng(seed, stream=77)
    x = rng.normal((3, 2, 4, 4))
    t = np.array([0.1, 0.5, 0.9])
    cond = np.array([0, 1, 2])
    worst = 0.0
    for f in cfg.widths:
        scfg, sstore = materialize(store, cfg, f)
        a = subnet_forward(store, cfg, x, t, cond, f).data
        b = dit_forward(as_tensors(slice_parameters(sstore, scfg, 1.0)), scfg, x, t, cond, 1.0).data
        worst = max(worst, float(np.max(np.abs(a - b))))
    return CheckResult("slice_parity", worst <= 1e-6, f"max abs diff {worst:.2e}")


def check_flops(seed: int) -> CheckResult:
    from .bench import flop_report, instrumented_macs
    from .elastic import enumerate_parameter_count, parameter_count

    bad = []
    for cfg in (ModelConfig(), tiny_config()):
        for f in cfg.widths:
            rep = flop_report(cfg, f, batch=2)
            got = instrumented_macs(cfg, f, batch=2, seed=seed)
            if rep["total"] != got.total:
                bad.append(f"macs f={f}: {rep['total']} vs {got.total}")
            if parameter_count(cfg, f) != enumerate_parameter_count(cfg, f):
                bad.append(f"params f={f}")
    return CheckResult("flop_and_parameter_counts", not bad, "; ".join(bad) or "closed forms equal executed counts")


def check_gmm_posterior(seed: int) -> CheckResult:
    """Single-Gaussian velocity against the closed-form posterior mean."""
    from .oracle import GMMSpec, analytic_velocity

    rng = nx.Rng(seed, stream=78)
    mean = rng.normal((6,), dtype=np.float64)
    s2 = 0.3
    spec = GMMSpec.isotropic(mean, s2)
    x = rng.normal((50, 6), dtype=np.float64)
    t = rng.uniform(0.05, 0.95, 50, dtype=np.float64)
    tb = t[:, None]
    gain = (1 - tb) * s2 / ((1 - tb) ** 2 * s2 + tb**2)
    x0 = mean + gain * (x - (1 - tb) * mean)
    ref = (x - (1 - tb) * x0) / tb - x0
    err = float(np.max(np.abs(analytic_velocity(spec, x, t) - ref)))
    return CheckResult("gmm_velocity_closed_form", err <= 1e-9, f"max abs diff {err:.2e}")


def check_lora_merge(seed: int) -> CheckResult:
    from .kdmd import LoRAAdapter, lora_apply, lora_merge, lora_targets

    cfg = tiny_config()
    with nx.precision("float64"):
        store = init_params(cfg, nx.Rng(seed, stream=79), random_all=True)
    base = slice_parameters(store, cfg, 1.0)
    ad = LoRAAdapter.init(base, lora_targets(cfg), nx.Rng(seed, stream=80), rank=4, alpha=8.0)
    for k in ad.factors:
        if k.endswith(".A"):
            ad.factors[k] = nx.Rng(seed, stream=81).normal(ad.factors[k].shape, 0.1, dtype=np.float64)
    x = nx.Rng(seed, stream=82).normal((2, 2, 4, 4), dtype=np.float64)
    t, cond = np.array([0.2, 0.7]), np.array([1, 0])
    a = dit_forward(as_tensors(lora_apply(base, ad)), cfg, x, t, cond, 1.0).data
    b = dit_forward(as_tensors(lora_merge(base, ad)), cfg, x, t, cond, 1.0).data
    err = float(np.max(np.abs(a - b)))
    return CheckResult("lora_merge_equivalence", err <= 1e-10, f"max abs diff {err:.2e}")


def check_checkpoint(seed: int) -> CheckResult:
    from .data_io import load_model, save_model

    cfg = tiny_config()
    store = init_params(cfg, nx.Rng(seed, stream=83), random_all=True)
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "m.esdt"
        save_model(path, cfg, store, seed)
        cfg2, store2, _, meta = load_model(path)
    same = cfg2 == cfg and set(store2) == set(store) and all(np.array_equal(store[k], store2[k]) for k in store)
    return CheckResult("checkpoint_roundtrip", same, "bit-exact" if same else "mismatch after reload")


CHECKS: list[Callable[[int], CheckResult]] = [
    check_bna_forward,
    check_bna_gradient,
    check_backends,
    check_model_gradient,
    check_slicing,
    check_flops,
    check_gmm_posterior,
    check_lora_merge,
    check_checkpoint,
]


def run_all(seed: int = 0) -> list[CheckResult]:
    out = []
    for check in CHECKS:
        try:
            out.append(check(seed))
        except Exception as exc:  # a crash is a failed check, not an aborted suite
            out.append(CheckResult(check.__name__.removeprefix("check_"), False, f"{type(exc).__name__}: {exc}"))
    return out
