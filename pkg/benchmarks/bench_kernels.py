"""Compare the compiled and numpy f-divergence kernels.

    python benchmarks/bench_kernels.py [--rows 256 4096 65536] [--classes 10] [--repeat 20]

Prints one line per (kind, rows) with the best-of-``repeat`` time of each
backend, their ratio and the max absolute difference of the outputs. A second
section times one end-to-end quickstart run under each backend, showing how
much of the total the kernel accounts for.
"""

import argparse
import os
import subprocess
import sys
import time
import timeit
from pathlib import Path

import numpy as np

from ffum import _pykernels

try:
    from ffum import _ckernels
except ImportError:
    _ckernels = None

ROOT = Path(__file__).resolve().parents[1]
NAMES = {_pykernels.KL: "KL", _pykernels.CHI2: "CHI2", _pykernels.JS: "JS"}


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_table(rows_list, k, repeat):
    rng = np.random.default_rng(0)
    print(f"{'kind':5} {'rows':>7} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8} {'max diff':>9}")
    for n in rows_list:
        P = rng.dirichlet(np.ones(k), size=n)
        Q = np.clip(rng.dirichlet(np.ones(k), size=n), 1e-7, None)
        Q /= Q.sum(axis=1, keepdims=True)
        for kind, name in NAMES.items():
            t_py = best_of(lambda: _pykernels.fdiv_rows(P, Q, kind), repeat)
            if _ckernels is None:
                print(f"{name:5} {n:7d} {1e3 * t_py:10.3f} {'n/a':>10}")
                continue
            t_c = best_of(lambda: _ckernels.fdiv_rows(P, Q, kind), repeat)
            diff = max(float(np.max(np.abs(a - b)))
                       for a, b in zip(_pykernels.fdiv_rows(P, Q, kind), _ckernels.fdiv_rows(P, Q, kind)))
            print(f"{name:5} {n:7d} {1e3 * t_py:10.3f} {1e3 * t_c:10.3f} {t_py / t_c:8.2f} {diff:9.1e}")


def end_to_end(tmp):
    print("\nquickstart end to end (one process per backend):")
    for label, env in (("numpy", {"FFUM_PURE_PYTHON": "1"}), ("cython", {"FFUM_PURE_PYTHON": "0"})):
        t0 = time.perf_counter()
        subprocess.run([sys.executable, "-m", "ffum", "run", str(ROOT / "configs" / "quickstart.json"),
                        "--out", str(Path(tmp) / label)], check=True, env={**os.environ, **env},
                       stdout=subprocess.DEVNULL)
        print(f"  {label:6} {time.perf_counter() - t0:6.2f} s")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, nargs="+", default=[256, 4096, 65536])
    ap.add_argument("--classes", type=int, default=10)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--skip-end-to-end", action="store_true")
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled kernel not built; timing the numpy fallback only")
    kernel_table(args.rows, args.classes, args.repeat)
    if not args.skip_end_to_end:
        import tempfile

        with tempfile.TemporaryDirectory() as tmp:
            end_to_end(tmp)


if __name__ == "__main__":
    main()
