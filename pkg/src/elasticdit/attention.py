"""Dense, KV-compressed, blockwise-neighborhood and adaptive sparse attention.

Heads are laid out as ``(batch, heads, tokens, head_dim)``; layer inputs and
outputs stay channel-first ``(batch, channels, H, W)`` with tokens taken in
row-major order of the grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import _kernels
from . import numerics as nx
from .numerics import ShapeError, Tensor

__all__ = [
    "AttentionConfig",
    "NeighborhoodMask",
    "neighborhood_mask",
    "kv_compress",
    "dense_attention",
    "bna",
    "adaptive_fuse",
    "assa",
    "self_attention",
    "attention_pair_count",
    "split_heads",
    "merge_heads",
]


@dataclass(frozen=True)
class AttentionConfig:
    query_heads: int = 4
    kv_heads: int = 4
    block_count: int = 2
    radius: int = 1
    compression_stride: int = 2
    boundary: str = "shift"

    def __post_init__(self):
        if self.query_heads < 1 or self.kv_heads < 1:
            raise ValueError("head counts must be positive")
        if self.query_heads % self.kv_heads:
            raise ValueError(f"kv_heads={self.kv_heads} must divide query_heads={self.query_heads}")
        if self.kv_heads not in (1, 8, self.query_heads):
            raise ValueError(f"kv_heads must be 1 (MQA), 8 (GQA) or query_heads, got {self.kv_heads}")
        if self.block_count < 1 or self.radius < 0:
            raise ValueError("block_count must be positive and radius non-negative")
        if self.compression_stride != 2:
            raise ValueError("only stride-2 key/value compression is supported")
        if self.boundary not in ("shift", "clip"):
            raise ValueError(f"boundary must be 'shift' or 'clip', got {self.boundary!r}")


# ---------------------------------------------------------------------------
# masks


@dataclass(frozen=True)
class NeighborhoodMask:
    matrix: np.ndarray
    block_count: int
    radius: int

    @property
    def true_count(self) -> int:
        return int(self.matrix.sum())

    def to_pgm(self, path: str | Path) -> None:
        """Binary PGM (P5, maxval 255); visible entries are white."""
        n_rows, n_cols = self.matrix.shape
        body = np.where(self.matrix, 255, 0).astype(np.uint8).tobytes()
        Path(path).write_bytes(f"P5\n{n_cols} {n_rows}\n255\n".encode("ascii") + body)


def _check_blocks(n: int, nblocks: int) -> None:
    if nblocks < 1 or n % nblocks:
        raise ShapeError(f"block_count {nblocks} does not divide token count {n}")


def neighborhood_mask(n: int, nblocks: int, radius: int, boundary: str = "shift") -> NeighborhoodMask:
    _check_blocks(n, nblocks)
    nb = n // nblocks
    m = np.zeros((n, n), dtype=bool)
    for blk in range(nblocks):
        lo, hi = _kernels.neighborhood_range(blk, nblocks, radius, nb, boundary == "shift")
        m[blk * nb : (blk + 1) * nb, lo:hi] = True
    return NeighborhoodMask(m, nblocks, radius)


# ---------------------------------------------------------------------------
# head reshapes


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``(B, C, H, W) -> (B, heads, H*W, C/heads)``."""
    b, c, h, w = x.shape
    if c % heads:
        raise ShapeError(f"channels {c} not divisible by {heads} heads")
    return x.reshape(b, heads, c // heads, h * w).transpose(0, 1, 3, 2)


def merge_heads(x: Tensor, h: int, w: int) -> Tensor:
    """``(B, heads, H*W, d) -> (B, heads*d, H, W)``."""
    b, nh, n, d = x.shape
    return x.transpose(0, 1, 3, 2).reshape(b, nh * d, h, w)


# ---------------------------------------------------------------------------
# attention primitives


def kv_compress(k: Tensor, v: Tensor, params: Mapping[str, Tensor], prefix: str) -> tuple[Tensor, Tensor]:
    """Stride-2 2x2 convolutions over channel-first key and value grids."""
    for name, t in (("k", k), ("v", v)):
        if t.ndim != 4:
            raise ShapeError(f"kv_compress: {name} must be (B, C, H, W), got {t.shape}")
        if t.shape[2] % 2 or t.shape[3] % 2:
            raise ShapeError(f"kv_compress: odd extents H={t.shape[2]}, W={t.shape[3]}")
    kc = nx.conv2x2_s2(k, params[f"{prefix}.kc.w"], params[f"{prefix}.kc.b"], tag="proj")
    vc = nx.conv2x2_s2(v, params[f"{prefix}.vc.w"], params[f"{prefix}.vc.b"], tag="proj")
    return kc, vc


def _as_heads(x) -> Tensor:
    x = nx.as_tensor(x)
    if x.ndim == 2:
        return x.reshape(1, 1, *x.shape)
    if x.ndim == 3:
        return x.reshape(x.shape[0], 1, *x.shape[1:])
    return x


def dense_attention(q, k, v, mask: NeighborhoodMask | np.ndarray | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d)) v with key/value heads shared across query groups.

    Accepts ``(N, d)``, ``(B, N, d)`` or ``(B, heads, N, d)``; returns the same rank as ``q``.
    """
    rank = nx.as_tensor(q).ndim
    q, k, v = _as_heads(q), _as_heads(k), _as_heads(v)
    b, hq, nq, d = q.shape
    hkv, nk = k.shape[1], k.shape[2]
    if k.shape[3] != d or v.shape[:3] != k.shape[:3]:
        raise ShapeError(f"dense_attention: q {q.shape}, k {k.shape}, v {v.shape}")
    if hq % hkv:
        raise ShapeError(f"dense_attention: {hkv} kv heads do not divide {hq} query heads")
    g = hq // hkv
    if mask is not None:
        mask = mask.matrix if isinstance(mask, NeighborhoodMask) else np.asarray(mask, bool)
        if mask.shape != (nq, nk):
            raise ShapeError(f"dense_attention: mask {mask.shape} vs logits ({nq}, {nk})")
    qg = q.reshape(b, hkv, g, nq, d)
    kt = k.reshape(b, hkv, 1, nk, d).transpose(0, 1, 2, 4, 3)
    logits = nx.matmul(qg, kt, tag="attn") * (1.0 / math.sqrt(d))
    p = nx.softmax(logits, mask)
    out = nx.matmul(p, v.reshape(b, hkv, 1, nk, v.shape[3]), tag="attn").reshape(b, hq, nq, v.shape[3])
    if rank == 2:
        return out.reshape(nq, v.shape[3])
    if rank == 3:
        return out.reshape(b, nq, v.shape[3])
    return out


def bna(q, k, v, block_count: int, radius: int, boundary: str = "shift") -> Tensor:
    """Blockwise neighborhood attention over contiguous token blocks.

    Numerically equal to :func:`dense_attention` under
    ``neighborhood_mask(N, block_count, radius, boundary)``.
    """
    rank = nx.as_tensor(q).ndim
    q, k, v = _as_heads(q), _as_heads(k), _as_heads(v)
    b, hq, n, d = q.shape
    if k.shape[2] != n or v.shape[2] != n:
        raise ShapeError(f"bna: query and key token counts differ ({n} vs {k.shape[2]})")
    if k.shape[3] != d or v.shape != k.shape or k.shape[0] != b or hq % k.shape[1]:
        raise ShapeError(f"bna: q {q.shape}, k {k.shape}, v {v.shape}")
    _check_blocks(n, block_count)
    shift = boundary == "shift"
    scale = 1.0 / math.sqrt(d)
    qd, kd, vd = q.data, k.data, v.data
    out, lse = _kernels.bna_forward(qd, kd, vd, block_count, radius, scale, shift)
    if nx._COUNTERS:
        nb = n // block_count
        pairs = sum(
            nb * (hi - lo)
            for lo, hi in (
                _kernels.neighborhood_range(blk, block_count, radius, nb, shift) for blk in range(block_count)
            )
        )
        nx.add_macs(2 * b * hq * pairs * d, "attn")

    def vjp(g):
        return _kernels.bna_backward(qd, kd, vd, out, lse, g, block_count, radius, scale, shift)

    res = nx.custom_op(out, (q, k, v), vjp)
    if rank == 2:
        return res.reshape(n, d)
    if rank == 3:
        return res.reshape(b, n, d)
    return res


def adaptive_fuse(global_out: Tensor, local_out: Tensor, hidden: Tensor, gate_w, gate_b) -> Tensor:
    """Per-head interpolation g*global + (1-g)*local.

    g = sigmoid(gate_w @ mean_pool(hidden) + gate_b), one scalar per head.
    """
    if global_out.shape != local_out.shape:
        raise ShapeError(f"adaptive_fuse: branches {global_out.shape} vs {local_out.shape}")
    b, heads = global_out.shape[:2]
    pooled = hidden.mean(axis=(2, 3))
    gate = nx.sigmoid(nx.linear(pooled, gate_w, gate_b, tag="gate"))
    if gate.shape != (b, heads):
        raise ShapeError(f"adaptive_fuse: gate {gate.shape} vs {heads} heads")
    gate = gate.reshape(b, heads, 1, 1)
    return local_out + gate * (global_out - local_out)


def _qkv(hidden: Tensor, params, prefix: str, heads: int, kv_heads: int):
    q = nx.linear(hidden, params[f"{prefix}.q.w"], params[f"{prefix}.q.b"], tag="proj")
    k = nx.linear(hidden, params[f"{prefix}.k.w"], params[f"{prefix}.k.b"], tag="proj")
    v = nx.linear(hidden, params[f"{prefix}.v.w"], params[f"{prefix}.v.b"], tag="proj")
    if q.shape[1] % heads or k.shape[1] % kv_heads or q.shape[1] // heads != k.shape[1] // kv_heads:
        raise ShapeError(f"projection widths q={q.shape[1]}, kv={k.shape[1]} incompatible with heads")
    return q, k, v


def assa(hidden: Tensor, cfg: AttentionConfig, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    """Adaptive sparse self-attention layer on a channel-first grid."""
    if hidden.ndim != 4:
        raise ShapeError(f"assa expects (B, C, H, W), got {hidden.shape}")
    _, _, h, w = hidden.shape
    q, k, v = _qkv(hidden, params, prefix, cfg.query_heads, cfg.kv_heads)
    kc, vc = kv_compress(k, v, params, prefix)
    qh = split_heads(q, cfg.query_heads)
    global_out = dense_attention(qh, split_heads(kc, cfg.kv_heads), split_heads(vc, cfg.kv_heads))
    local_out = bna(
        qh, split_heads(k, cfg.kv_heads), split_heads(v, cfg.kv_heads),
        cfg.block_count, cfg.radius, cfg.boundary,
    )
    fused = adaptive_fuse(global_out, local_out, hidden, params[f"{prefix}.gate.w"], params[f"{prefix}.gate.b"])
    return nx.linear(merge_heads(fused, h, w), params[f"{prefix}.o.w"], params[f"{prefix}.o.b"], tag="proj")


def self_attention(hidden: Tensor, cfg: AttentionConfig, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    """Full dense self-attention layer (middle stage, and the latency baseline)."""
    _, _, h, w = hidden.shape
    q, k, v = _qkv(hidden, params, prefix, cfg.query_heads, cfg.kv_heads)
    out = dense_attention(split_heads(q, cfg.query_heads), split_heads(k, cfg.kv_heads), split_heads(v, cfg.kv_heads))
    return nx.linear(merge_heads(out, h, w), params[f"{prefix}.o.w"], params[f"{prefix}.o.b"], tag="proj")


# ---------------------------------------------------------------------------
# cost accounting


@dataclass(frozen=True)
class PairCount:
    dense_pairs: int
    global_pairs: int
    local_pairs: int

    @property
    def ratio(self) -> float:
        return (self.global_pairs + self.local_pairs) / self.dense_pairs

    def __iter__(self):
        return iter((self.dense_pairs, self.global_pairs, self.local_pairs, self.ratio))


def attention_pair_count(n: int, cfg: AttentionConfig, compression: bool = True) -> PairCount:
    """Query-key pairs scored by dense attention and by the two sparse branches."""
    _check_blocks(n, cfg.block_count)
    nb = n // cfg.block_count
    shift = cfg.boundary == "shift"
    if shift:
        local = n * min(2 * cfg.radius + 1, cfg.block_count) * nb
    else:
        local = 0
        for blk in range(cfg.block_count):
            lo, hi = _kernels.neighborhood_range(blk, cfg.block_count, cfg.radius, nb, False)
            local += nb * (hi - lo)
    s = cfg.compression_stride
    glob = n * (n // (s * s)) if compression else 0
    return PairCount(n * n, glob, local)
