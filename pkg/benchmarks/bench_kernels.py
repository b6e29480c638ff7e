"""Compiled vs pure-Python kernel timings.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints the median wall time per call of each kernel for both backends and
the speed-up; exits non-zero if the backends disagree numerically.
"""
import argparse
import statistics
import sys
import time

import numpy as np
import scipy.sparse as sp

from mhe_fusion import _kernels_py

try:
    from mhe_fusion import _kernels
except ImportError:
    _kernels = None


def _spd_window(n_states=16, width=5, n_static=6, seed=0):
    """Block-tridiagonal SPD matrix with dense static rows, like a window's H."""
    rng = np.random.default_rng(seed)
    n = n_states * width + n_static
    A = np.zeros((n, n))
    for k in range(n_states):
        i = n_static + k * width
        j = i + 2 * width if k + 1 < n_states else i + width
        B = rng.normal(size=(j - i, j - i))
        A[i:j, i:j] += B @ B.T
        S = rng.normal(size=(n_static, j - i)) * 0.1
        A[:n_static, i:j] += S
        A[i:j, :n_static] += S.T
    A += n * np.eye(n)
    H = sp.csc_matrix(A)
    return n, H.indptr.astype(np.int64), H.indices.astype(np.int64), H.data, A


def _chain_inputs(m=100, seed=1):
    rng = np.random.default_rng(seed)
    x0 = np.array([0.0, 0.0, 0.3, 1.0, 0.2])
    return x0, rng.normal(size=(m, 3)), np.full(m, 0.01)


def _cases():
    n, Ap, Ai, Ax, A = _spd_window()
    b = np.arange(n, dtype=float)
    x0, u, dts = _chain_inputs()
    factors = {k.__name__: k.cholesky(n, Ap, Ai, Ax) for k in (_kernels_py, _kernels) if k}
    wheels = np.column_stack([np.full(100, 5.0), np.full(100, 6.0)])
    return {
        "cholesky": lambda k: k.cholesky(n, Ap, Ai, Ax),
        "cholesky_solve": lambda k: k.cholesky_solve(*factors[k.__name__], b),
        "constvel_chain": lambda k: k.constvel_chain(x0, u, dts, [1e-4, 1e-2, 1e-2],
                                                     [1e-8, 1e-8, 1e-8, 1e-6, 1e-6]),
        "diffdrive_chain": lambda k: k.diffdrive_chain(x0[:3], wheels, dts, 0.1, 0.5,
                                                       [1e-6, 1e-6, 1e-6], 100.0, 1.0, 1e-3),
    }


def _time(fn, repeat):
    fn()
    samples = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t)
    return statistics.median(samples)


def _flatten(out):
    if isinstance(out, tuple):
        return np.concatenate([np.ravel(np.asarray(o, dtype=float)) for o in out])
    return np.ravel(out)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; only the Python backend is available")
    ok = True
    print(f"{'kernel':18s} {'python [ms]':>12s} {'compiled [ms]':>14s} {'speed-up':>9s}")
    for name, call in _cases().items():
        tp = _time(lambda: call(_kernels_py), args.repeat)
        if _kernels is None:
            print(f"{name:18s} {tp * 1e3:12.3f} {'-':>14s} {'-':>9s}")
            continue
        tc = _time(lambda: call(_kernels), args.repeat)
        diff = np.max(np.abs(_flatten(call(_kernels_py)) - _flatten(call(_kernels))))
        ok &= diff < 1e-9
        print(f"{name:18s} {tp * 1e3:12.3f} {tc * 1e3:14.3f} {tp / tc:8.1f}x  (max diff {diff:.1e})")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
