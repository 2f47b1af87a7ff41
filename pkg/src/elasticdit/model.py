"""Three-stage Down/Middle/Up diffusion transformer.

Parameters live in a flat ``name -> ndarray`` store.  Every parameter is
declared with symbolic extents (see :data:`WIDTH_TOKENS`) so the elastic
module can resolve its shape at any registered width.  The forward pass
consumes a *view* already resolved for one width.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .attention import AttentionConfig, assa, dense_attention, merge_heads, self_attention, split_heads
from .numerics import Rng, ShapeError, Tensor

__all__ = [
    "StageLayout",
    "ModelConfig",
    "ParamSpec",
    "param_specs",
    "init_params",
    "patchify",
    "unpatchify",
    "stage_resample",
    "transformer_block",
    "dit_forward",
    "embed_condition",
    "timestep_embedding",
    "width_key",
]

# symbolic extents: resolved per width by ModelConfig.extent
WIDTH_TOKENS = ("d", "kv", "ffo", "ffm", "6d")


@dataclass(frozen=True)
class StageLayout:
    down_depth: int = 2
    middle_depth: int = 4
    up_depth: int = 2
    hidden_width: int = 64
    ffn_ratio_outer: int = 4
    ffn_ratio_middle: int = 3
    use_assa_outer: bool = True
    skip_topology: tuple[tuple[int, int], ...] | None = None
    long_skip: bool = True

    def __post_init__(self):
        if min(self.down_depth, self.middle_depth, self.up_depth) < 0:
            raise ValueError("stage depths must be non-negative")
        if self.up_depth < self.down_depth:
            raise ValueError(f"up_depth {self.up_depth} < down_depth {self.down_depth}")
        if self.skip_topology is None:
            m = self.middle_depth
            object.__setattr__(self, "skip_topology", tuple((i, m - 1 - i) for i in range(m // 2)))
        else:
            object.__setattr__(self, "skip_topology", tuple(tuple(p) for p in self.skip_topology))
        for src, dst in self.skip_topology:
            if not 0 <= src < dst < self.middle_depth:
                raise ValueError(f"skip ({src}, {dst}) must link an earlier middle layer to a later one")

    @classmethod
    def from_total_depth(cls, total_depth: int, hidden_width: int, **kw) -> "StageLayout":
        """Half the layers in the middle, the rest split with the extra one in Up,
        then two layers moved from the middle to each outer stage."""
        middle = total_depth // 2
        rest = total_depth - middle
        down = rest // 2 if rest % 2 else rest // 2 - 1
        up = rest - down
        if middle < 4:
            raise ValueError("total depth too small to redistribute four middle layers")
        return cls(down + 2, middle - 4, up + 2, hidden_width, **kw)

    @property
    def depth(self) -> int:
        return self.down_depth + self.middle_depth + self.up_depth


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 2
    latent_size: int = 4
    patch_size: int = 2
    layout: StageLayout = field(default_factory=StageLayout)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    middle_attention: AttentionConfig | None = None
    cond_dim: int = 32
    cond_len: int = 4
    num_classes: int = 2
    t_freq_dim: int = 32
    cross_width: int | None = None
    widths: tuple[float, ...] = (0.375, 0.5, 1.0)
    pos_embed: bool = True

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(sorted(float(f) for f in self.widths)))
        if 1.0 not in self.widths:
            raise ValueError("width fraction 1.0 must be registered")
        p = self.patch_size
        if self.latent_size % p:
            raise ShapeError(f"latent size {self.latent_size} not divisible by patch {p}")
        if (self.latent_size // p) % 2:
            raise ShapeError(f"token grid {self.latent_size // p} must be even for the 2x2 downsample")
        for f in self.widths:
            if not 0.0 < f <= 1.0:
                raise ValueError(f"width fraction {f} outside (0, 1]")
            d = self.width_at(f)
            if d % self.attention.query_heads:
                raise ValueError(f"width {f}: {d} channels not divisible by {self.attention.query_heads} heads")
        if self.cross_dim % self.attention.query_heads:
            raise ValueError("cross-attention width must be divisible by the head count")

    @property
    def mid_attention(self) -> AttentionConfig:
        return self.middle_attention or self.attention

    @property
    def cross_dim(self) -> int:
        return self.cross_width or self.layout.hidden_width

    @property
    def grid(self) -> int:
        return self.latent_size // self.patch_size

    def width_at(self, f: float) -> int:
        return math.ceil(round(f * self.layout.hidden_width, 9))

    def check_width(self, f: float) -> float:
        f = float(f)
        if f not in self.widths:
            raise ValueError(f"width {f} is not registered (registered: {self.widths})")
        return f

    def extent(self, token, f: float) -> int:
        if isinstance(token, int):
            return token
        d = self.width_at(f)
        if token == "d":
            return d
        if token == "kv":
            return self.attention.kv_heads * d // self.attention.query_heads
        if token == "kvm":
            a = self.mid_attention
            return a.kv_heads * d // a.query_heads
        if token == "ffo":
            return self.layout.ffn_ratio_outer * d
        if token == "ffm":
            return self.layout.ffn_ratio_middle * d
        if token == "6d":
            return 6 * d
        if token == "X":
            return self.cross_dim
        raise KeyError(token)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        d["layout"] = StageLayout(**d["layout"])
        d["attention"] = AttentionConfig(**d["attention"])
        if d.get("middle_attention") is not None:
            d["middle_attention"] = AttentionConfig(**d["middle_attention"])
        d["widths"] = tuple(d["widths"])
        return cls(**d)

    @classmethod
    def reference_large(cls) -> "ModelConfig":
        """Full-scale shape: 64x64x32 latents at patch 1 (4096 outer tokens), 24 layers, d=1792.

        Sliced counts come to about 0.27B / 0.43B / 1.49B parameters at the
        default widths.  Only counted, never instantiated.
        """
        return cls(
            in_channels=32,
            latent_size=64,
            patch_size=1,
            layout=StageLayout.from_total_depth(24, 1792, ffn_ratio_middle=3),
            attention=AttentionConfig(16, 16, 16, 1),
            cond_dim=1024,
            cond_len=300,
            num_classes=1,
            t_freq_dim=256,
            cross_width=1024,
        )

    def standalone(self, f: float) -> "ModelConfig":
        """Config of a plain model with the same shapes as the width-f subnetwork."""
        f = self.check_width(f)
        return replace(
            self,
            layout=replace(self.layout, hidden_width=self.width_at(f)),
            cross_width=self.cross_dim,
            widths=(1.0,),
        )


@dataclass(frozen=True)
class ParamSpec:
    dims: tuple
    init: str = "xavier"
    per_width: bool = False

    @property
    def width_axes(self) -> tuple[int, ...]:
        return tuple(i for i, t in enumerate(self.dims) if t in WIDTH_TOKENS or t == "kvm")

    @property
    def rule(self) -> str:
        if self.per_width:
            return "per-width-copy"
        axes = set(self.width_axes)
        if not axes:
            return "fixed"
        if axes >= {0, 1}:
            return "slice-both"
        return "slice-rows" if axes == {0} else "slice-cols"


def width_key(name: str, f: float) -> str:
    return f"{name}@{f:g}"


def _block_specs(prefix: str, cfg: ModelConfig, kind: str, stage: str) -> dict[str, ParamSpec]:
    ff = "ffo" if stage in ("down", "up") else "ffm"
    kv = "kv" if stage in ("down", "up") else "kvm"
    heads = cfg.attention.query_heads if stage != "mid" else cfg.mid_attention.query_heads
    s = {
        f"{prefix}.table": ParamSpec((6, "d"), "zeros", per_width=True),
        f"{prefix}.attn.q.w": ParamSpec(("d", "d")),
        f"{prefix}.attn.q.b": ParamSpec(("d",), "zeros"),
        f"{prefix}.attn.k.w": ParamSpec((kv, "d")),
        f"{prefix}.attn.k.b": ParamSpec((kv,), "zeros"),
        f"{prefix}.attn.v.w": ParamSpec((kv, "d")),
        f"{prefix}.attn.v.b": ParamSpec((kv,), "zeros"),
        f"{prefix}.attn.o.w": ParamSpec(("d", "d")),
        f"{prefix}.attn.o.b": ParamSpec(("d",), "zeros"),
    }
    if kind == "assa":
        s.update(
            {
                f"{prefix}.attn.kc.w": ParamSpec((kv, kv, 2, 2), "avgpool"),
                f"{prefix}.attn.kc.b": ParamSpec((kv,), "zeros"),
                f"{prefix}.attn.vc.w": ParamSpec((kv, kv, 2, 2), "avgpool"),
                f"{prefix}.attn.vc.b": ParamSpec((kv,), "zeros"),
                f"{prefix}.attn.gate.w": ParamSpec((heads, "d"), "zeros"),
                f"{prefix}.attn.gate.b": ParamSpec((heads,), "zeros"),
            }
        )
    s.update(
        {
            f"{prefix}.cnorm.g": ParamSpec(("d",), "ones", per_width=True),
            f"{prefix}.cnorm.b": ParamSpec(("d",), "zeros", per_width=True),
            f"{prefix}.cross.q.w": ParamSpec(("X", "d")),
            f"{prefix}.cross.q.b": ParamSpec(("X",), "zeros"),
            f"{prefix}.cross.k.w": ParamSpec(("X", cfg.cond_dim)),
            f"{prefix}.cross.k.b": ParamSpec(("X",), "zeros"),
            f"{prefix}.cross.v.w": ParamSpec(("X", cfg.cond_dim)),
            f"{prefix}.cross.v.b": ParamSpec(("X",), "zeros"),
            f"{prefix}.cross.o.w": ParamSpec(("d", "X"), "zeros"),
            f"{prefix}.cross.o.b": ParamSpec(("d",), "zeros"),
            f"{prefix}.ffn.fc1.w": ParamSpec((ff, "d")),
            f"{prefix}.ffn.fc1.b": ParamSpec((ff,), "zeros"),
            f"{prefix}.ffn.fc2.w": ParamSpec(("d", ff)),
            f"{prefix}.ffn.fc2.b": ParamSpec(("d",), "zeros"),
        }
    )
    return s


def param_specs(cfg: ModelConfig) -> dict[str, ParamSpec]:
    """Every parameter of the supernetwork with its symbolic extents."""
    lay = cfg.layout
    c_patch = cfg.in_channels * cfg.patch_size**2
    outer = "assa" if lay.use_assa_outer else "dense"
    specs: dict[str, ParamSpec] = {
        "patch.w": ParamSpec(("d", c_patch)),
        "patch.b": ParamSpec(("d",), "zeros"),
        "t.fc1.w": ParamSpec(("d", cfg.t_freq_dim), "normal"),
        "t.fc1.b": ParamSpec(("d",), "zeros"),
        "t.fc2.w": ParamSpec(("d", "d"), "normal"),
        "t.fc2.b": ParamSpec(("d",), "zeros"),
        "t.block.w": ParamSpec(("6d", "d"), "zeros", per_width=True),
        "t.block.b": ParamSpec(("6d",), "zeros", per_width=True),
        "cond.table": ParamSpec((cfg.num_classes + 1, cfg.cond_len, cfg.cond_dim), "unit"),
        "cond.pos": ParamSpec((cfg.cond_len, cfg.cond_dim), "unit"),
    }
    for i in range(lay.down_depth):
        specs.update(_block_specs(f"down.{i}", cfg, outer, "down"))
    specs["down.resample.w"] = ParamSpec(("d", "d", 2, 2))
    specs["down.resample.b"] = ParamSpec(("d",), "zeros")
    for i in range(lay.middle_depth):
        specs.update(_block_specs(f"mid.{i}", cfg, "dense", "mid"))
    for j, _ in enumerate(lay.skip_topology):
        specs[f"mid.skip{j}.w"] = ParamSpec(("d", "d"))
        specs[f"mid.skip{j}.b"] = ParamSpec(("d",), "zeros")
    specs["up.resample.w"] = ParamSpec(("d", "d", 2, 2))
    specs["up.resample.b"] = ParamSpec(("d",), "zeros")
    if lay.long_skip:
        specs["long.w"] = ParamSpec(("d", 2, "d"), "long")
        specs["long.b"] = ParamSpec(("d",), "zeros")
    for i in range(lay.up_depth):
        specs.update(_block_specs(f"up.{i}", cfg, outer, "up"))
    specs["final.table"] = ParamSpec((2, "d"), "zeros", per_width=True)
    specs["final.w"] = ParamSpec((c_patch, "d"), "zeros")
    specs["final.b"] = ParamSpec((c_patch,), "zeros")
    return specs


def _init_array(spec: ParamSpec, shape: tuple[int, ...], rng: Rng, random_all: bool) -> np.ndarray:
    dtype = nx.default_dtype()
    kind = spec.init
    if random_all and kind in ("zeros", "ones"):
        base = 1.0 if kind == "ones" else 0.0
        return (base + rng.normal(shape, 0.2)).astype(dtype)
    if kind == "zeros":
        return np.zeros(shape, dtype)
    if kind == "ones":
        return np.ones(shape, dtype)
    if kind == "normal":
        return rng.normal(shape, 0.02 if not random_all else 0.3)
    if kind == "unit":
        return rng.normal(shape, 1.0)
    if kind == "avgpool":
        w = np.zeros(shape, dtype)
        n = min(shape[0], shape[1])
        w[np.arange(n), np.arange(n)] = 0.25
        if random_all:
            w += rng.normal(shape, 0.1)
        return w
    if kind == "long":
        out, groups, inp = shape
        bound = math.sqrt(6.0 / (out + groups * inp))
        return rng.uniform(-bound, bound, shape)
    # xavier uniform over (out, in * receptive field)
    fan_out = shape[0] * (math.prod(shape[2:]) if len(shape) > 2 else 1)
    fan_in = math.prod(shape[1:]) if len(shape) > 1 else shape[0]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape)


def init_params(cfg: ModelConfig, rng: Rng, random_all: bool = False) -> dict[str, np.ndarray]:
    """Supernetwork store: shared arrays at full width plus per-width copies.

    ``random_all`` replaces the zero/identity initializations with random
    values (used by gradient and wiring checks).
    """
    store: dict[str, np.ndarray] = {}
    for name, spec in param_specs(cfg).items():
        if spec.per_width:
            for f in cfg.widths:
                shape = tuple(cfg.extent(t, f) for t in spec.dims)
                store[width_key(name, f)] = _init_array(spec, shape, rng, random_all)
        else:
            shape = tuple(cfg.extent(t, 1.0) for t in spec.dims)
            store[name] = _init_array(spec, shape, rng, random_all)
    return store


# ---------------------------------------------------------------------------
# embeddings


def timestep_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding of t in [0, 1] (scaled by 1000)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1) * 1000.0
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb.astype(nx.default_dtype())


def _axis_sincos(pos: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    omega = 1.0 / 10000 ** (np.arange(half) / max(half, 1))
    out = np.zeros((len(pos), dim))
    args = pos[:, None] * omega[None]
    out[:, :half] = np.sin(args)
    out[:, half : 2 * half] = np.cos(args)
    return out


def pos_embedding(d: int, grid: int, dtype=None) -> np.ndarray:
    """2-D sin-cos table shaped ``(1, d, grid, grid)``."""
    ys, xs = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")
    dy = d // 2
    emb = np.concatenate([_axis_sincos(ys.reshape(-1), dy), _axis_sincos(xs.reshape(-1), d - dy)], axis=1)
    return emb.T.reshape(1, d, grid, grid).astype(dtype or nx.default_dtype())


def embed_condition(params: Mapping[str, Tensor], labels) -> Tensor:
    """Class labels (``num_classes`` = null) to condition tokens ``(B, L, cond_dim)``."""
    table = params["cond.table"]
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.min() < 0 or labels.max() >= table.shape[0]:
        raise ValueError(f"labels must lie in [0, {table.shape[0] - 1}]")
    return nx.take_rows(table, labels)


# ---------------------------------------------------------------------------
# building blocks


def patchify(latent, p: int = 2) -> Tensor:
    """``(B, C, H, W) -> (B, C*p*p, H/p, W/p)``; no embedding."""
    latent = nx.as_tensor(latent)
    if latent.ndim != 4 or latent.shape[2] % p or latent.shape[3] % p:
        raise ShapeError(f"patchify: extents {latent.shape} not divisible by patch {p}")
    return nx.space_to_depth(latent, p)


def unpatchify(tokens, p: int = 2) -> Tensor:
    return nx.depth_to_space(nx.as_tensor(tokens), p)


def stage_resample(tokens: Tensor, direction: str, w, b) -> Tensor:
    """``down``: 2x2 space-to-channel + linear; ``up``: linear + channel-to-space."""
    if direction == "down":
        if tokens.shape[2] % 2 or tokens.shape[3] % 2:
            raise ShapeError(f"stage_resample down: odd extents {tokens.shape[2:]}")
        return nx.conv2x2_s2(tokens, w, b, tag="proj")
    if direction == "up":
        return nx.conv_transpose2x2_s2(tokens, w, b, tag="proj")
    raise ValueError(f"direction must be 'down' or 'up', got {direction!r}")


def _col(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], x.shape[1], 1, 1)


def _cross_attention(x: Tensor, ctx: Tensor, params, prefix: str, heads: int) -> Tensor:
    b, _, h, w = x.shape
    q = nx.linear(x, params[f"{prefix}.q.w"], params[f"{prefix}.q.b"], tag="proj")
    k = nx.linear(ctx, params[f"{prefix}.k.w"], params[f"{prefix}.k.b"], tag="proj")
    v = nx.linear(ctx, params[f"{prefix}.v.w"], params[f"{prefix}.v.b"], tag="proj")
    length = ctx.shape[2]
    xd = k.shape[1]
    kh = k.reshape(b, heads, xd // heads, length).transpose(0, 1, 3, 2)
    vh = v.reshape(b, heads, xd // heads, length).transpose(0, 1, 3, 2)
    out = dense_attention(split_heads(q, heads), kh, vh)
    return nx.linear(merge_heads(out, h, w), params[f"{prefix}.o.w"], params[f"{prefix}.o.b"], tag="proj")


def _affine_norm(x: Tensor, g, b) -> Tensor:
    return nx.layer_norm(x) * g.reshape(1, -1, 1, 1) + b.reshape(1, -1, 1, 1)


def transformer_block(
    x: Tensor,
    mod: Tensor,
    ctx: Tensor,
    kind: str,
    params: Mapping[str, Tensor],
    prefix: str,
    attn_cfg: AttentionConfig,
) -> Tensor:
    """Modulated attention, cross-attention on condition tokens, modulated GELU FFN.

    ``mod`` is the shared timestep modulation ``(B, 6*d)``; ``ctx`` holds the
    condition tokens channel-first ``(B, cond_dim, L)``.
    """
    b, d = x.shape[:2]
    m = (mod.reshape(b, 6, d) + params[f"{prefix}.table"].reshape(1, 6, d)).reshape(b, 6, d, 1, 1)
    shift_a, scale_a, gate_a, shift_f, scale_f, gate_f = (m[:, i] for i in range(6))
    h = nx.layer_norm(x) * (scale_a + 1.0) + shift_a
    if kind == "assa":
        a = assa(h, attn_cfg, params, f"{prefix}.attn")
    elif kind == "dense":
        a = self_attention(h, attn_cfg, params, f"{prefix}.attn")
    else:
        raise ValueError(f"unknown block kind {kind!r}")
    x = x + gate_a * a
    hc = _affine_norm(x, params[f"{prefix}.cnorm.g"], params[f"{prefix}.cnorm.b"])
    x = x + _cross_attention(hc, ctx, params, f"{prefix}.cross", attn_cfg.query_heads)
    h = nx.layer_norm(x) * (scale_f + 1.0) + shift_f
    h = nx.linear(h, params[f"{prefix}.ffn.fc1.w"], params[f"{prefix}.ffn.fc1.b"], tag="proj")
    h = nx.linear(nx.gelu(h), params[f"{prefix}.ffn.fc2.w"], params[f"{prefix}.ffn.fc2.b"], tag="proj")
    return x + gate_f * h


def _condition_tokens(params, cond) -> Tensor:
    if isinstance(cond, Tensor) or (isinstance(cond, np.ndarray) and cond.ndim == 3):
        tokens = nx.as_tensor(cond)
    else:
        tokens = embed_condition(params, cond)
    pos = params["cond.pos"]
    if tokens.shape[1:] != pos.shape:
        raise ShapeError(f"condition tokens {tokens.shape[1:]} vs expected {pos.shape}")
    return (tokens + pos.reshape(1, *pos.shape)).transpose(0, 2, 1)


def dit_forward(
    params: Mapping[str, Tensor],
    cfg: ModelConfig,
    x_t,
    t,
    cond,
    width: float = 1.0,
    return_features: bool = False,
    ablate: Sequence[str] = (),
):
    """Velocity prediction with the same shape as ``x_t``.

    ``params`` is a width-resolved view (see :func:`elasticdit.elastic.slice_parameters`).
    ``cond`` is either integer labels or condition tokens ``(B, L, cond_dim)``.
    ``ablate`` may name ``"long_skip"``, ``"pos_embed"`` or ``"skip{j}"`` to drop wiring.
    """
    width = cfg.check_width(width)
    x_t = nx.as_tensor(x_t)
    expected = (cfg.in_channels, cfg.latent_size, cfg.latent_size)
    if x_t.ndim != 4 or x_t.shape[1:] != expected:
        raise ShapeError(f"x_t shape {x_t.shape} does not match latent {expected}")
    bsz = x_t.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (bsz,))
    d = cfg.width_at(width)
    lay = cfg.layout
    p = cfg.patch_size

    h = nx.linear(patchify(x_t, p), params["patch.w"], params["patch.b"], tag="proj")
    if h.shape[1] != d:
        raise ShapeError(f"parameter view has width {h.shape[1]}, expected {d} for f={width}")
    if cfg.pos_embed and "pos_embed" not in ablate:
        h = h + pos_embedding(d, cfg.grid, h.dtype)

    temb = nx.Tensor(timestep_embedding(t, cfg.t_freq_dim).astype(h.dtype))
    c = nx.linear(temb, params["t.fc1.w"], params["t.fc1.b"], tag="proj")
    c = nx.linear(nx.silu(c), params["t.fc2.w"], params["t.fc2.b"], tag="proj")
    mod = nx.linear(nx.silu(c), params["t.block.w"], params["t.block.b"], tag="proj")
    ctx = _condition_tokens(params, cond)

    outer = "assa" if lay.use_assa_outer else "dense"
    for i in range(lay.down_depth):
        h = transformer_block(h, mod, ctx, outer, params, f"down.{i}", cfg.attention)
    before_down = h
    h = stage_resample(h, "down", params["down.resample.w"], params["down.resample.b"])
    outs: list[Tensor] = []
    for i in range(lay.middle_depth):
        for j, (src, dst) in enumerate(lay.skip_topology):
            if dst == i and f"skip{j}" not in ablate:
                h = h + nx.linear(outs[src], params[f"mid.skip{j}.w"], params[f"mid.skip{j}.b"], tag="proj")
        h = transformer_block(h, mod, ctx, "dense", params, f"mid.{i}", cfg.mid_attention)
        outs.append(h)
    h = stage_resample(h, "up", params["up.resample.w"], params["up.resample.b"])
    if lay.long_skip and "long_skip" not in ablate:
        lw = params["long.w"]
        merged = nx.concat([h, before_down], axis=1)
        h = nx.linear(merged, lw.reshape(lw.shape[0], -1), params["long.b"], tag="proj")
    for i in range(lay.up_depth):
        h = transformer_block(h, mod, ctx, outer, params, f"up.{i}", cfg.attention)
    features = h

    fm = (params["final.table"].reshape(1, 2, d) + c.reshape(bsz, 1, d)).reshape(bsz, 2, d, 1, 1)
    h = nx.layer_norm(h) * (fm[:, 1] + 1.0) + fm[:, 0]
    out = unpatchify(nx.linear(h, params["final.w"], params["final.b"], tag="proj"), p)
    if return_features:
        return out, features
    return out


def token_ledger(cfg: ModelConfig) -> dict[str, int]:
    """Tokens processed per stage."""
    n = cfg.grid**2
    return {"down": n, "middle": n // 4, "up": n}


def as_tensors(arrays: Mapping[str, np.ndarray], requires_grad: bool = False, prefix: str = "") -> dict[str, Tensor]:
    return {k: Tensor(v, name=prefix + k, requires_grad=requires_grad) for k, v in arrays.items()}


def iter_block_prefixes(cfg: ModelConfig) -> Iterable[tuple[str, str]]:
    lay = cfg.layout
    outer = "assa" if lay.use_assa_outer else "dense"
    for i in range(lay.down_depth):
        yield f"down.{i}", outer
    for i in range(lay.middle_depth):
        yield f"mid.{i}", "dense"
    for i in range(lay.up_depth):
        yield f"up.{i}", outer
