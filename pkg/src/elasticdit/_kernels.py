"""Blockwise neighborhood attention kernels.

Two interchangeable implementations: numba-compiled loops over
(batch, head, block) and a pure-numpy path batched over (batch, head).
``ELASTICDIT_BACKEND=numpy`` forces the fallback; the numba path is used
whenever numba imports.

Layouts: ``q`` is (batch, q_heads, N, d); ``k``/``v`` are (batch, kv_heads, N, d)
with q_heads a multiple of kv_heads (query head h reads kv head h // group).
"""

from __future__ import annotations

import os
import warnings

import numpy as np

try:
    import numba
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAVE_NUMBA = False

_requested = os.environ.get("ELASTICDIT_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"ELASTICDIT_BACKEND must be 'numba' or 'numpy', got {_requested!r}")
_BACKEND = "numba" if (_requested == "numba" and HAVE_NUMBA) else "numpy"


def get_backend() -> str:
    return _BACKEND


def set_backend(name: str) -> str:
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend."""
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    prev, _BACKEND = _BACKEND, name
    return prev


def neighborhood_range(
    block: int, nblocks: int, radius: int, block_size: int, shift: bool = True
) -> tuple[int, int]:
    """Token range [lo, hi) of the key blocks visible from ``block``.

    ``shift`` keeps the window at min(2r+1, B) blocks by sliding it inward at
    the sequence ends; otherwise the window is clipped.
    """
    if shift:
        width = min(2 * radius + 1, nblocks)
        first = min(max(block - radius, 0), nblocks - width)
        return first * block_size, (first + width) * block_size
    lo = max(block - radius, 0) * block_size
    hi = min(block + radius + 1, nblocks) * block_size
    return lo, hi


# ---------------------------------------------------------------------------
# numpy path


def _bna_forward_numpy(q, k, v, nblocks, radius, shift, scale):
    bsz, hq, n, d = q.shape
    hkv = k.shape[1]
    grp = hq // hkv
    nb = n // nblocks
    qg = q.reshape(bsz, hkv, grp, n, d)
    out = np.empty_like(qg)
    lse = np.empty((bsz, hkv, grp, n), dtype=q.dtype)
    for blk in range(nblocks):
        lo, hi = neighborhood_range(blk, nblocks, radius, nb, shift)
        rows = slice(blk * nb, (blk + 1) * nb)
        s = np.matmul(qg[:, :, :, rows], np.swapaxes(k[:, :, None, lo:hi], -1, -2)) * scale
        m = s.max(axis=-1, keepdims=True)
        e = np.exp(s - m)
        z = e.sum(axis=-1, keepdims=True)
        out[:, :, :, rows] = np.matmul(e / z, v[:, :, None, lo:hi])
        lse[:, :, :, rows] = (m + np.log(z))[..., 0]
    return out.reshape(bsz, hq, n, d), lse.reshape(bsz, hq, n)


def _bna_backward_numpy(q, k, v, out, lse, dout, nblocks, radius, shift, scale):
    bsz, hq, n, d = q.shape
    hkv = k.shape[1]
    grp = hq // hkv
    nb = n // nblocks
    qg = q.reshape(bsz, hkv, grp, n, d)
    og = out.reshape(bsz, hkv, grp, n, d)
    dog = dout.reshape(bsz, hkv, grp, n, d)
    lg = lse.reshape(bsz, hkv, grp, n)
    dq = np.empty_like(qg)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    delta = (dog * og).sum(axis=-1)
    for blk in range(nblocks):
        lo, hi = neighborhood_range(blk, nblocks, radius, nb, shift)
        rows = slice(blk * nb, (blk + 1) * nb)
        ks = k[:, :, None, lo:hi]
        vs = v[:, :, None, lo:hi]
        qs = qg[:, :, :, rows]
        dos = dog[:, :, :, rows]
        s = np.matmul(qs, np.swapaxes(ks, -1, -2)) * scale
        p = np.exp(s - lg[:, :, :, rows, None])
        dv[:, :, lo:hi] += np.matmul(np.swapaxes(p, -1, -2), dos).sum(axis=2)
        dp = np.matmul(dos, np.swapaxes(vs, -1, -2))
        ds = p * (dp - delta[:, :, :, rows, None])
        dq[:, :, :, rows] = np.matmul(ds, ks) * scale
        dk[:, :, lo:hi] += (np.matmul(np.swapaxes(ds, -1, -2), qs) * scale).sum(axis=2)
    return dq.reshape(q.shape), dk, dv


# ---------------------------------------------------------------------------
# numba path

if HAVE_NUMBA:
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
    # transposed (Fortran-ordered) operands go to BLAS directly; copying them is slower
    warnings.filterwarnings("ignore", category=numba.NumbaPerformanceWarning, module=__name__)

    @njit(cache=True)
    def _range_nb(blk, nblocks, radius, nb, shift):
        if shift:
            width = min(2 * radius + 1, nblocks)
            first = min(max(blk - radius, 0), nblocks - width)
            return first * nb, (first + width) * nb
        return max(blk - radius, 0) * nb, min(blk + radius + 1, nblocks) * nb

    @njit(fastmath=True, cache=True)
    def _exp_row_f32(x, out, ibuf):
        """out = exp(x) for float32 rows of non-positive values.

        libm expf does not vectorize, so the row is computed with a
        Cody-Waite reduction, a degree-6 Taylor polynomial on |r| <= ln2/2
        and a 2^n factor assembled from exponent bits (about 2 ulp).
        """
        scale = ibuf.view(np.float32)
        for j in range(x.shape[0]):
            xv = max(x[j], np.float32(-87.0))
            n = np.floor(xv * np.float32(1.4426950408889634) + np.float32(0.5))
            r = xv - n * np.float32(0.693145751953125) - n * np.float32(1.4286068203094173e-06)
            p = np.float32(0.0013888889) * r + np.float32(0.008333334)
            p = p * r + np.float32(0.041666668)
            p = p * r + np.float32(0.16666667)
            p = p * r + np.float32(0.5)
            p = p * r + np.float32(1.0)
            p = p * r + np.float32(1.0)
            ibuf[j] = (np.int32(n) + np.int32(127)) << 23
            out[j] = p
        for j in range(x.shape[0]):
            out[j] *= scale[j]

    @njit(cache=True)
    def _exp_row_f64(x, out, ibuf):
        for j in range(x.shape[0]):
            out[j] = np.exp(x[j])

    @njit(cache=True)
    def _softmax_rows(s, lse, row0, exp_row, ibuf, tmp):
        """In-place row softmax of ``s``; writes row log-sum-exp to lse[row0 + i]."""
        for i in range(s.shape[0]):
            m = s[i, 0]
            for j in range(1, s.shape[1]):
                if s[i, j] > m:
                    m = s[i, j]
            for j in range(s.shape[1]):
                tmp[j] = s[i, j] - m
            exp_row(tmp, s[i], ibuf)
            z = s[i].sum()
            inv = 1.0 / z
            for j in range(s.shape[1]):
                s[i, j] *= inv
            lse[row0 + i] = m + np.log(z)

    @njit(parallel=True, cache=True)
    def _bna_forward_numba(q, k, v, nblocks, radius, shift, scale, exp_row, itype):
        bsz, hq, n, d = q.shape
        hkv = k.shape[1]
        grp = hq // hkv
        nb = n // nblocks
        out = np.empty_like(q)
        lse = np.empty((bsz, hq, n), dtype=q.dtype)
        width = nb * min(2 * radius + 1, nblocks)
        total = bsz * hq * nblocks
        for idx in prange(total):
            bi = idx // (hq * nblocks)
            h = (idx // nblocks) % hq
            blk = idx % nblocks
            hk = h // grp
            lo, hi = _range_nb(blk, nblocks, radius, nb, shift)
            r0 = blk * nb
            ibuf = np.empty(width, dtype=itype)
            tmp = np.empty(hi - lo, dtype=q.dtype)
            ks = np.ascontiguousarray(k[bi, hk, lo:hi, :])
            s = np.dot(np.ascontiguousarray(q[bi, h, r0 : r0 + nb, :]), ks.T)
            s *= scale
            _softmax_rows(s, lse[bi, h], r0, exp_row, ibuf, tmp)
            out[bi, h, r0 : r0 + nb, :] = np.dot(s, np.ascontiguousarray(v[bi, hk, lo:hi, :]))
        return out, lse

    @njit(parallel=True, cache=True)
    def _bna_backward_numba(q, k, v, out, lse, dout, nblocks, radius, shift, scale, exp_row, itype):
        bsz, hq, n, d = q.shape
        hkv = k.shape[1]
        grp = hq // hkv
        nb = n // nblocks
        dq = np.empty_like(q)
        dk = np.zeros_like(k)
        dv = np.zeros_like(v)
        width = nb * min(2 * radius + 1, nblocks)
        for idx in prange(bsz * hkv):
            bi = idx // hkv
            hk = idx % hkv
            ibuf = np.empty(width, dtype=itype)
            tmp = np.empty(width, dtype=q.dtype)
            for gi in range(grp):
                h = hk * grp + gi
                for blk in range(nblocks):
                    lo, hi = _range_nb(blk, nblocks, radius, nb, shift)
                    r0 = blk * nb
                    m = hi - lo
                    qs = np.ascontiguousarray(q[bi, h, r0 : r0 + nb, :])
                    dos = np.ascontiguousarray(dout[bi, h, r0 : r0 + nb, :])
                    ks = np.ascontiguousarray(k[bi, hk, lo:hi, :])
                    vs = np.ascontiguousarray(v[bi, hk, lo:hi, :])
                    p = np.dot(qs, ks.T)
                    for i in range(nb):
                        li = lse[bi, h, r0 + i]
                        for j in range(m):
                            tmp[j] = p[i, j] * scale - li
                        exp_row(tmp[:m], p[i], ibuf)
                    dv[bi, hk, lo:hi, :] += np.dot(p.T, dos)
                    dp = np.dot(dos, vs.T)
                    for i in range(nb):
                        delta = 0.0
                        for c in range(d):
                            delta += dos[i, c] * out[bi, h, r0 + i, c]
                        for j in range(m):
                            dp[i, j] = p[i, j] * (dp[i, j] - delta) * scale
                    dq[bi, h, r0 : r0 + nb, :] = np.dot(dp, ks)
                    dk[bi, hk, lo:hi, :] += np.dot(dp.T, qs)
        return dq, dk, dv


# ---------------------------------------------------------------------------
# dispatch


def _exp_impl(dtype):
    if dtype == np.float32:
        return _exp_row_f32, np.int32
    return _exp_row_f64, np.int64


def bna_forward(
    q, k, v, nblocks: int, radius: int, scale: float, shift: bool = True, backend: str | None = None
):
    """Returns (output, row log-sum-exp)."""
    backend = backend or _BACKEND
    if backend == "numba":
        c = np.ascontiguousarray
        exp_row, itype = _exp_impl(q.dtype)
        return _bna_forward_numba(c(q), c(k), c(v), nblocks, radius, bool(shift), q.dtype.type(scale), exp_row, itype)
    return _bna_forward_numpy(q, k, v, nblocks, radius, shift, scale)


def bna_backward(
    q, k, v, out, lse, dout, nblocks: int, radius: int, scale: float, shift: bool = True,
    backend: str | None = None,
):
    """Returns (dq, dk, dv)."""
    backend = backend or _BACKEND
    if backend == "numba":
        c = np.ascontiguousarray
        return _bna_backward_numba(
            c(q), c(k), c(v), c(out), c(lse), c(dout, dtype=q.dtype),
            nblocks, radius, bool(shift), q.dtype.type(scale), *_exp_impl(q.dtype),
        )
    return _bna_backward_numpy(q, k, v, out, lse, dout, nblocks, radius, shift, scale)
