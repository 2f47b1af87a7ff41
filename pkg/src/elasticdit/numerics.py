"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable primitive funnels through :func:`custom_op`, which
appends a record (inputs, output, vector-Jacobian product) to the active
:class:`Tape`.  :func:`backward` replays the records in reverse.

Activations follow the channel-first layout ``(batch, channel, height, width)``.
"""

from __future__ import annotations

import contextlib
import math
import os
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NumericalError",
    "Tensor",
    "Tape",
    "Rng",
    "backward",
    "finite_diff_grad",
    "rel_error",
    "precision",
    "default_dtype",
    "count_macs",
    "custom_op",
    "stop_gradient",
]

LN_EPS = 1e-6

CHECK_FINITE = os.environ.get("ELASTICDIT_CHECK_FINITE", "0") == "1"


class ShapeError(ValueError):
    """Operand extents violate a primitive's contract."""


class NumericalError(ArithmeticError):
    """A NaN or Inf surfaced where a finite value is required."""


# ---------------------------------------------------------------------------
# precision and operation counting

_DTYPE: list[type] = [np.float32]


def default_dtype() -> np.dtype:
    return np.dtype(_DTYPE[-1])


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Switch the default dtype (``"float32"`` or ``"float64"``) for a block."""
    if name not in ("float32", "float64"):
        raise ValueError(f"unknown precision {name!r}")
    _DTYPE.append(np.float32 if name == "float32" else np.float64)
    try:
        yield
    finally:
        _DTYPE.pop()


class _MacCounter:
    def __init__(self) -> None:
        self.total = 0
        self.by_tag: dict[str, int] = {}

    def add(self, n: int, tag: str) -> None:
        self.total += int(n)
        self.by_tag[tag] = self.by_tag.get(tag, 0) + int(n)


_COUNTERS: list[_MacCounter] = []


@contextlib.contextmanager
def count_macs() -> Iterator[_MacCounter]:
    """Count multiply-adds executed by matmul-like primitives inside the block."""
    counter = _MacCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


def add_macs(n: int, tag: str) -> None:
    for c in _COUNTERS:
        c.add(n, tag)


# ---------------------------------------------------------------------------
# tensors and tapes


class Tensor:
    """Numpy array plus the bookkeeping needed for differentiation.

    Leaves with ``requires_grad=True`` are parameters; tensors produced while a
    tape is active carry a reference to that tape.
    """

    __slots__ = ("data", "name", "requires_grad", "tape")
    __array_priority__ = 100

    def __init__(self, data, name: str | None = None, requires_grad: bool = False):
        if isinstance(data, np.ndarray):
            self.data = data
        elif isinstance(data, np.generic):
            # 0-d arithmetic yields numpy scalars; keep their precision
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=default_dtype())
        self.name = name
        self.requires_grad = requires_grad
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not a supported primitive")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Tape:
    """Ordered operation records; single owner, used as a context manager."""

    def __init__(self) -> None:
        self.records: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)


_TAPES: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _tracked(t: Tensor, tape: Tape) -> bool:
    return t.tape is tape or (t.requires_grad and t.tape is None)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, np.ndarray):
        return Tensor(x)
    return Tensor(np.asarray(x, dtype=default_dtype()))


def custom_op(out: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``out`` as a Tensor and record it if any input is tracked.

    ``vjp(g)`` must return one gradient (or ``None``) per input.
    """
    if CHECK_FINITE and not np.all(np.isfinite(out)):
        raise NumericalError("non-finite values produced by a primitive")
    result = Tensor(out)
    tape = _active_tape()
    if tape is not None and any(_tracked(t, tape) for t in inputs):
        result.tape = tape
        tape.records.append((tuple(inputs), result, vjp))
    return result


def stop_gradient(x: Tensor) -> Tensor:
    """Same values, cut from every tape."""
    return Tensor(as_tensor(x).data)


def backward(
    tape: Tape, root: Tensor, wrt: Mapping[str, Tensor] | None = None
) -> dict[str, np.ndarray]:
    """Gradient of scalar ``root`` with respect to leaf parameters.

    With ``wrt`` given, the map has exactly those keys; leaves that do not
    require gradients (or are unreachable) receive zeros.  Otherwise every
    named leaf encountered on the tape is reported.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if root.tape is tape:
        grads[id(root)] = np.ones_like(root.data)
    for inputs, out, vjp in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = vjp(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not _tracked(t, tape):
                continue
            if t.tape is None:
                leaves[id(t)] = t
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    if wrt is None:
        out_map: dict[str, np.ndarray] = {}
        for key, t in leaves.items():
            if t.name is None:
                continue
            if t.name in out_map:
                raise ValueError(f"duplicate leaf name {t.name!r}; pass wrt explicitly")
            out_map[t.name] = grads[key]
        return out_map
    result = {}
    for name, t in wrt.items():
        g = grads.get(id(t)) if t.requires_grad else None
        result[name] = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.data.dtype)
    return result


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_grad(
    f: Callable[[], float], params: Mapping[str, np.ndarray], h: float = 1e-5
) -> dict[str, np.ndarray]:
    """Central differences of ``f()`` with respect to arrays mutated in place."""
    if h <= 0:
        raise ValueError("step h must be positive")
    out = {}
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ValueError(f"finite differences need float64 parameters ({name} is {p.dtype})")
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        if not np.shares_memory(flat, p):
            raise ValueError(f"parameter {name} is not contiguous")
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f())
            flat[i] = orig - h
            fm = float(f())
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericalError(f"non-finite objective while perturbing {name}[{i}]")
            gflat[i] = (fp - fm) / (2 * h)
        out[name] = g
    return out


def rel_error(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> float:
    """Norm-relative discrepancy between two gradient maps with equal keys."""
    if set(a) != set(b):
        raise ValueError(f"gradient maps differ in keys: {sorted(set(a) ^ set(b))}")
    num = den_a = den_b = 0.0
    for k in a:
        x = np.asarray(a[k], dtype=np.float64)
        y = np.asarray(b[k], dtype=np.float64)
        num += float(np.sum((x - y) ** 2))
        den_a += float(np.sum(x * x))
        den_b += float(np.sum(y * y))
    den = max(math.sqrt(den_a), math.sqrt(den_b))
    if den == 0.0:
        return math.sqrt(num)
    return math.sqrt(num) / den


# ---------------------------------------------------------------------------
# randomness


class Rng:
    """Counter-based generator keyed by (seed, stream)."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        self.gen = np.random.Generator(np.random.Philox(ss))

    def spawn(self, stream: int) -> "Rng":
        return Rng(self.seed, stream)

    def normal(self, shape, scale: float = 1.0, dtype=None) -> np.ndarray:
        dtype = dtype or default_dtype()
        return (self.gen.standard_normal(shape) * scale).astype(dtype)

    def uniform(self, low: float, high: float, shape, dtype=None) -> np.ndarray:
        dtype = dtype or default_dtype()
        return self.gen.uniform(low, high, shape).astype(dtype)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self.gen.integers(low, high, shape)

    def choice(self, options: Sequence, p=None):
        return options[int(self.gen.choice(len(options), p=p))]


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def _operands(a, b) -> tuple[Tensor, Tensor]:
    """Tensors for a binary op; a Python scalar takes its partner's dtype."""
    scalar = (int, float)
    if isinstance(a, scalar) and not isinstance(b, scalar):
        b = as_tensor(b)
        if np.issubdtype(b.dtype, np.floating):
            return Tensor(np.asarray(a, dtype=b.dtype)), b
    elif isinstance(b, scalar) and not isinstance(a, scalar):
        a = as_tensor(a)
        if np.issubdtype(a.dtype, np.floating):
            return a, Tensor(np.asarray(b, dtype=a.dtype))
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return custom_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return custom_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return custom_op(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return custom_op(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def matmul(a, b, tag: str = "matmul") -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch extents {a.shape[:-2]} vs {b.shape[:-2]}") from None
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)
    if _COUNTERS:
        add_macs(math.prod(batch) * ad.shape[-2] * ad.shape[-1] * bd.shape[-1], tag)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return custom_op(out, (a, b), vjp)


def linear(x, w, b=None, tag: str = "linear") -> Tensor:
    """Channel-axis affine map: ``x`` is ``(batch, in, *spatial)``, ``w`` is ``(out, in)``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.ndim < 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input channels {x.shape[1:2]} vs weight {w.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias {b.shape} vs output channels {w.shape[0]}")
    xd, wd = x.data, w.data
    n, c = xd.shape[0], xd.shape[1]
    spatial = xd.shape[2:]
    s = math.prod(spatial)
    xr = xd.reshape(n, c, s)
    out = np.matmul(wd, xr)
    if b is not None:
        out += b.data[:, None]
    if _COUNTERS:
        add_macs(n * s * wd.shape[0] * c, tag)
    out = out.reshape((n, wd.shape[0]) + spatial)

    def vjp(g):
        gr = g.reshape(n, wd.shape[0], s)
        gx = np.matmul(wd.T, gr).reshape(xd.shape)
        gw = np.einsum("nos,ncs->oc", gr, xr, optimize=True)
        if b is None:
            return gx, gw
        return gx, gw, gr.sum(axis=(0, 2))

    inputs = (x, w) if b is None else (x, w, b)
    return custom_op(out, inputs, vjp)


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return custom_op(np.asarray(out), (x,), vjp)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = math.prod(x.shape[a] for a in axes)
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: {old} cannot become {tuple(shape)}") from None
    return custom_op(out, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return custom_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        gx = np.zeros(shape, dtype=dtype)
        gx[idx] += g
        return (gx,)

    return custom_op(np.asarray(x.data[idx]), (x,), vjp)


def take_rows(table, index: np.ndarray) -> Tensor:
    """Gather rows of ``table`` along axis 0 (embedding lookup)."""
    table = as_tensor(table)
    index = np.asarray(index)
    shape, dtype = table.shape, table.dtype

    def vjp(g):
        gt = np.zeros(shape, dtype=dtype)
        np.add.at(gt, index, g)
        return (gt,)

    return custom_op(table.data[index], (table,), vjp)


def concat(tensors: Sequence, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            i != axis % len(ref) and p != q for i, (p, q) in enumerate(zip(ref, t.shape))
        ):
            raise ShapeError(f"concat along {axis}: {ref} vs {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return custom_op(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def softmax(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` False entries get -inf logits."""
    x = as_tensor(x)
    xd = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            np.broadcast_shapes(mask.shape, xd.shape)
        except ValueError:
            raise ShapeError(f"softmax: mask {mask.shape} vs logits {xd.shape}") from None
        if not mask.any(axis=-1).all():
            raise ShapeError("softmax: mask has an all-false row")
        xd = np.where(mask, xd, -np.inf)
    z = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return custom_op(y, (x,), vjp)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return custom_op(y, (x,), lambda g: (g * y * (1.0 - y),))


def silu(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    s = 0.5 * (1.0 + np.tanh(0.5 * xd))
    return custom_op(xd * s, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    xd = x.data
    u = _GELU_C * (xd + 0.044715 * xd**3)
    th = np.tanh(u)
    y = 0.5 * xd * (1.0 + th)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * du),)

    return custom_op(y, (x,), vjp)


def layer_norm(x, axis: int = 1, eps: float = LN_EPS) -> Tensor:
    """Normalize along ``axis`` (channels for 4-D activations); no affine terms."""
    x = as_tensor(x)
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def vjp(g):
        gm = g.mean(axis=axis, keepdims=True)
        gxm = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return custom_op(xhat, (x,), vjp)


def space_to_depth(x, p: int = 2) -> Tensor:
    """``(B, C, H, W) -> (B, C*p*p, H/p, W/p)``, channel order (c, dy, dx)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"space_to_depth needs 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if h % p or w % p:
        raise ShapeError(f"space_to_depth: extents H={h}, W={w} not divisible by {p}")
    out = x.data.reshape(n, c, h // p, p, w // p, p).transpose(0, 1, 3, 5, 2, 4)
    out = out.reshape(n, c * p * p, h // p, w // p)

    def vjp(g):
        g = g.reshape(n, c, p, p, h // p, w // p).transpose(0, 1, 4, 2, 5, 3)
        return (g.reshape(n, c, h, w),)

    return custom_op(out, (x,), vjp)


def depth_to_space(x, p: int = 2) -> Tensor:
    """Inverse of :func:`space_to_depth`."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"depth_to_space needs 4-D input, got {x.shape}")
    n, cp, h, w = x.shape
    if cp % (p * p):
        raise ShapeError(f"depth_to_space: channels {cp} not divisible by {p * p}")
    c = cp // (p * p)
    out = x.data.reshape(n, c, p, p, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * p, w * p)

    def vjp(g):
        g = g.reshape(n, c, h, p, w, p).transpose(0, 1, 3, 5, 2, 4)
        return (g.reshape(n, cp, h, w),)

    return custom_op(out, (x,), vjp)


def conv2x2_s2(x, w, b=None, tag: str = "conv") -> Tensor:
    """2x2 convolution with stride 2 and no padding; ``w`` is ``(out, in, 2, 2)``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4:
        raise ShapeError(f"conv2x2_s2 needs 4-D input, got {x.shape}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"conv2x2_s2: odd spatial extents H={x.shape[2]}, W={x.shape[3]}")
    if w.shape[1:] != (x.shape[1], 2, 2):
        raise ShapeError(f"conv2x2_s2: weight {w.shape} vs input channels {x.shape[1]}")
    return linear(space_to_depth(x, 2), reshape(w, (w.shape[0], -1)), b, tag=tag)


def conv_transpose2x2_s2(x, w, b=None, tag: str = "conv") -> Tensor:
    """Transposed 2x2/stride-2 convolution; ``w`` is ``(in, out, 2, 2)``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[0] != x.shape[1] or w.shape[2:] != (2, 2):
        raise ShapeError(f"conv_transpose2x2_s2: weight {w.shape} vs input {x.shape}")
    c_out = w.shape[1]
    mat = transpose(reshape(w, (w.shape[0], c_out * 4)), (1, 0))
    y = depth_to_space(linear(x, mat, tag=tag), 2)
    if b is not None:
        y = add(y, reshape(b, (1, c_out, 1, 1)))
    return y
