"""Time the blockwise neighborhood attention kernels on both backends.

    python3 benchmarks/bench_kernels.py [--tokens 1024 4096] [--repeats 30] [--csv out.csv]

Each row is one forward+backward pass.  The numba timings exclude JIT
compilation (``latency_bench`` discards two warm-up calls).
"""

from __future__ import annotations

import argparse
import sys

from elasticdit import _kernels
from elasticdit.bench import compare_backends, host_fingerprint, write_csv


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--tokens", type=int, nargs="+", default=[1024, 4096])
    ap.add_argument("--blocks", type=int, default=16)
    ap.add_argument("--radius", type=int, default=1)
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--head-dim", type=int, default=16)
    ap.add_argument("--repeats", type=int, default=30)
    ap.add_argument("--csv", help="write the rows to this file")
    args = ap.parse_args(argv)

    if not _kernels.HAVE_NUMBA:
        print("numba is not installed; only the numpy backend will be timed", file=sys.stderr)
    print(f"host: {host_fingerprint()}")
    rows = []
    for n in args.tokens:
        res = compare_backends(n, args.heads, args.head_dim, args.blocks, args.radius, args.repeats)
        for be, r in res.items():
            rows.append({"backend": be, **r.row()})
        line = "  ".join(f"{be} {r.median_ms:8.2f} ms (IQR {r.iqr_ms:.2f})" for be, r in res.items())
        speedup = ""
        if "numba" in res:
            speedup = f"  numpy/numba {res['numpy'].median_ms / res['numba'].median_ms:.2f}x"
        print(f"N={n:>6}  {line}{speedup}")
    if args.csv:
        write_csv(args.csv, rows)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
