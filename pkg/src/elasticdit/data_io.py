"""Checkpoints, synthetic datasets and metrics streams.

Checkpoint layout (all integers little-endian)::

    b"ESDT" | u32 version | u64 header length | UTF-8 JSON header | padding | payload

The payload starts at the first 64-byte boundary after the header.  Every
tensor is raw float32, starts at a 64-byte aligned offset relative to the
payload start, and is listed in ``header["tensors"]`` as
``{"shape": [...], "dtype": "f32", "offset": int}``.
"""

from __future__ import annotations

import csv
import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .model import ModelConfig, param_specs, width_key
from .numerics import Rng

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "SyntheticImageSpec",
    "gen_dataset",
    "MetricsWriter",
    "METRICS_FIELDS",
    "DISTILL_FIELDS",
    "read_metrics",
    "save_model",
    "load_model",
]

MAGIC = b"ESDT"
FORMAT_VERSION = 1
ALIGN = 64
_PREAMBLE = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    """A checkpoint failed validation; ``field`` names the offending part."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _align(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


def _layout(tensors: Mapping[str, np.ndarray]) -> tuple[dict, int]:
    entries, offset = {}, 0
    for name in sorted(tensors):
        arr = tensors[name]
        entries[name] = {"shape": list(arr.shape), "dtype": "f32", "offset": offset}
        offset = _align(offset + 4 * arr.size)
    return entries, offset


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> Path:
    """Write tensors (cast to float32) plus JSON-serializable metadata.

    The file is written to a temporary sibling and renamed into place, so a
    crash never leaves a half-written checkpoint under ``path``.
    """
    path = Path(path)
    for name, arr in tensors.items():
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"tensors.{name}", "non-finite values")
    entries, payload_len = _layout(tensors)
    header = {"tensors": entries, "payload_bytes": payload_len, **dict(meta or {})}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    start = _align(_PREAMBLE.size + len(hbytes))
    buf = bytearray(start + payload_len)
    buf[: _PREAMBLE.size] = _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(hbytes))
    buf[_PREAMBLE.size : _PREAMBLE.size + len(hbytes)] = hbytes
    for name, e in entries.items():
        raw = np.ascontiguousarray(tensors[name], dtype="<f4").tobytes()
        o = start + e["offset"]
        buf[o : o + len(raw)] = raw
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(buf)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Returns (tensors, metadata); raises :class:`CheckpointError` on any violation."""
    data = Path(path).read_bytes()
    if len(data) < _PREAMBLE.size:
        raise CheckpointError("magic", "file shorter than the preamble")
    magic, version, hlen = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("magic", f"expected {MAGIC!r}, found {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError("version", f"unsupported format version {version}")
    if _PREAMBLE.size + hlen > len(data):
        raise CheckpointError("header_length", f"{hlen} bytes exceed the file")
    try:
        header = json.loads(data[_PREAMBLE.size : _PREAMBLE.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("header", f"unparseable JSON ({exc})") from None
    entries = header.pop("tensors", None)
    if not isinstance(entries, dict):
        raise CheckpointError("tensors", "missing tensor table")
    start = _align(_PREAMBLE.size + hlen)
    payload = len(data) - start
    declared = header.pop("payload_bytes", None)
    if declared is not None and declared != payload:
        raise CheckpointError("payload", f"declared {declared} bytes, file holds {payload}")
    out: dict[str, np.ndarray] = {}
    end_prev = 0
    for name, e in sorted(entries.items(), key=lambda kv: kv[1].get("offset", -1)):
        if e.get("dtype") != "f32":
            raise CheckpointError(f"tensors.{name}.dtype", f"unsupported dtype {e.get('dtype')!r}")
        shape = e.get("shape")
        if not isinstance(shape, list) or any((not isinstance(s, int)) or s < 0 for s in shape):
            raise CheckpointError(f"tensors.{name}.shape", f"invalid shape {shape!r}")
        off = e.get("offset")
        if not isinstance(off, int) or off % ALIGN:
            raise CheckpointError(f"tensors.{name}.offset", f"offset {off!r} not {ALIGN}-byte aligned")
        if off < end_prev:
            raise CheckpointError(f"tensors.{name}.offset", "overlaps the previous tensor")
        nbytes = 4 * math.prod(shape)
        if off + nbytes > payload:
            raise CheckpointError(f"tensors.{name}.offset", "extends past the payload")
        out[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=start + off).reshape(shape).astype(np.float32)
        end_prev = off + nbytes
    return out, header


def save_model(path, cfg: ModelConfig, store: Mapping[str, np.ndarray], seed: int, extra: Mapping | None = None,
               state: Mapping[str, np.ndarray] | None = None) -> Path:
    """Checkpoint a model store; the header records the architecture, widths and seed.

    ``state`` holds auxiliary arrays (optimizer moments, adapters) saved under
    their own names next to the parameters.
    """
    arch = cfg.to_dict()
    meta = {
        "model": arch,
        "layout": arch["layout"],
        "attention": arch["attention"],
        "widths": list(cfg.widths),
        "seed": int(seed),
        **dict(extra or {}),
    }
    tensors = {f"param/{k}": v for k, v in store.items()}
    tensors.update({f"state/{k}": v for k, v in (state or {}).items()})
    return save_checkpoint(path, tensors, meta)


def load_model(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict[str, np.ndarray], dict]:
    """Returns (config, parameter store, auxiliary state, header metadata)."""
    tensors, meta = load_checkpoint(path)
    if "model" not in meta:
        raise CheckpointError("model", "header has no architecture record")
    cfg = ModelConfig.from_dict(meta["model"])
    store = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
    state = {k[6:]: v for k, v in tensors.items() if k.startswith("state/")}
    expected = {}
    for name, spec in param_specs(cfg).items():
        for f in cfg.widths if spec.per_width else (1.0,):
            key = width_key(name, f) if spec.per_width else name
            expected[key] = tuple(cfg.extent(t, f) for t in spec.dims)
    missing = sorted(set(expected) - set(store))
    if missing:
        raise CheckpointError("tensors", f"missing parameters {missing[:3]}")
    for k, shape in expected.items():
        if store[k].shape != shape:
            raise CheckpointError(f"tensors.param/{k}.shape", f"{store[k].shape} vs architecture {shape}")
    return cfg, store, state, meta


# ---------------------------------------------------------------------------
# synthetic images


@dataclass(frozen=True)
class SyntheticImageSpec:
    """Procedural rectangles and discs; each class has its own colour and shape bias."""

    size: int = 8
    channels: int = 2
    classes: int = 4
    max_shapes: int = 3

    def class_colour(self, label: int) -> np.ndarray:
        angles = 2 * np.pi * (label / self.classes + np.arange(self.channels) / max(self.channels, 1))
        return np.cos(angles)


def _render(spec: SyntheticImageSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    s = spec.size
    img = np.full((spec.channels, s, s), -1.0)
    yy, xx = np.mgrid[0:s, 0:s]
    colour = spec.class_colour(label)
    for _ in range(int(rng.integers(1, spec.max_shapes + 1))):
        disc = rng.random() < (0.25 + 0.5 * (label % 2))
        if disc:
            cy, cx = rng.uniform(0, s, 2)
            r = rng.uniform(s / 8, s / 3)
            m = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            y0, x0 = rng.integers(0, s - 1, 2)
            h, w = rng.integers(2, max(3, s // 2 + 1), 2)
            m = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
        img[:, m] = colour[:, None] * rng.uniform(0.6, 1.0)
    return np.clip(img, -1.0, 1.0)


def gen_dataset(spec: SyntheticImageSpec, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Latents ``(n, C, S, S)`` in [-1, 1] and integer class labels."""
    if n < 1:
        raise ValueError("n must be at least 1")
    labels = Rng(seed, stream=101).integers(0, spec.classes, n)
    images = np.empty((n, spec.channels, spec.size, spec.size), dtype=np.float32)
    for i, lab in enumerate(labels):
        # one stream per item: each image depends only on (spec, class, seed, index)
        images[i] = _render(spec, int(lab), Rng(seed, stream=1000 + i).gen)
    return images, labels.astype(np.int64)


# ---------------------------------------------------------------------------
# metrics

METRICS_FIELDS = ("step", "wall_ms", "loss_diff", "loss_dist", "loss_out", "loss_feat", "loss_dmd", "val_loss", "width")
DISTILL_FIELDS = ("iteration", "role", "loss_dmd", "loss_out", "loss_feat", "critic_loss", "mmd")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "" if math.isnan(v) else repr(v)
    return str(v)


class MetricsWriter:
    """Append-only CSV with a fixed header; every row is flushed immediately.

    Reopening an existing file with the same header appends to it (used when
    a run resumes).  ``truncate_after`` drops rows past a resumed step so a
    resumed run reproduces the uninterrupted file.
    """

    def __init__(self, path, fields: Sequence[str] = METRICS_FIELDS, key: str | None = None):
        self.path = Path(path)
        self.fields = tuple(fields)
        self.key = key or self.fields[0]
        self._last = None
        header = ",".join(self.fields) + "\n"
        if self.path.exists() and self.path.stat().st_size:
            with open(self.path, newline="") as fh:
                first = fh.readline()
            if first != header:
                raise ValueError(f"{self.path} has a different header: {first.strip()!r}")
        else:
            with open(self.path, "w", newline="") as fh:
                fh.write(header)

    def truncate_after(self, value: int) -> None:
        rows = read_metrics(self.path)
        keep = [r for r in rows if int(r[self.key]) <= value]
        with open(self.path, "w", newline="") as fh:
            fh.write(",".join(self.fields) + "\n")
            for r in keep:
                fh.write(",".join(r[f] for f in self.fields) + "\n")

    def append(self, row: Mapping[str, Any]) -> None:
        unknown = set(row) - set(self.fields)
        if unknown:
            raise KeyError(f"unknown metrics columns {sorted(unknown)}")
        line = ",".join(_fmt(row.get(f)) for f in self.fields) + "\n"
        with open(self.path, "a", newline="") as fh:
            fh.write(line)
            fh.flush()


def metrics_append(stream: MetricsWriter, row: Mapping[str, Any]) -> None:
    stream.append(row)


def read_metrics(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
