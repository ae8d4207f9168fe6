"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--points N] [--repeat R]

Both backends must produce identical results; the script checks that
before printing timings.
"""

import argparse
import timeit

import numpy as np

from inif._kernels import _pykernels
from inif.siren import SirenArchitecture, init_siren

try:
    from inif._kernels import _ckernels
except ImportError:
    _ckernels = None


def _cases(points: int):
    params = init_siren(SirenArchitecture(3, 1, 32), 0)
    flat = params.flat()
    dims = np.asarray(params.arch.dims, dtype=np.int_)
    coords = np.random.default_rng(0).uniform(-1, 1, (points, 3))

    rng = np.random.default_rng(1)
    nblocks = 4096
    dc = rng.integers(-3000, 3000, nblocks)
    ac = rng.integers(-20, 21, (nblocks, 63)) * (rng.random((nblocks, 63)) < 0.15)
    payload, nbits = _pykernels.encode_symbols(dc, ac)

    return {
        f"siren_forward_points ({points} pts, width 32)": lambda m: m.siren_forward_points(flat, dims, coords),
        f"encode_symbols ({nblocks} blocks)": lambda m: m.encode_symbols(dc, ac),
        f"decode_symbols ({nblocks} blocks)": lambda m: m.decode_symbols(payload, nbits, nblocks, 64),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    if isinstance(a, np.ndarray):
        return np.array_equal(a, b)
    return a == b


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled kernels are not built; only the fallback can run")
    cases = _cases(args.points)
    print(f"{'kernel':44s} {'python s':>10s} {'cython s':>10s} {'speedup':>8s}")
    for name, fn in cases.items():
        tp = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat))
        if _ckernels is None:
            print(f"{name:44s} {tp:10.4f} {'-':>10s} {'-':>8s}")
            continue
        if not _same(fn(_pykernels), fn(_ckernels)):
            raise SystemExit(f"{name}: backends disagree")
        tc = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=args.repeat))
        print(f"{name:44s} {tp:10.4f} {tc:10.4f} {tp / tc:7.1f}x")


if __name__ == "__main__":
    main()
