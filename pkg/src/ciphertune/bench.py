"""Micro-benchmark comparing the numba and numpy kernel backends.

Times the hot loops (forward/inverse NTT batches, general pointwise modular
multiplication, constant multiplication) on identical inputs and prints a
speedup table.  Run via `ciphertune bench`.
"""

import time

import numpy as np

from .backend import get_kernels
from .ring import RnsBasis, find_ntt_primes


def _timeit(fn, repeats):
    fn()  # warm-up (JIT compile on the numba side)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_bench(n=8192, levels=8, repeats=20, out=print):
    basis = RnsBasis(find_ntt_primes(40, 2 * n, levels), n)
    rng = np.random.default_rng(0)
    res = np.empty((levels, n), dtype=np.uint64)
    for i in range(levels):
        res[i] = rng.integers(0, int(basis.moduli[i]), n, dtype=np.uint64)
    other = np.roll(res, 1, axis=1).copy()
    mods = basis.moduli[:levels]
    consts = np.array([3] * levels, dtype=np.uint64)
    shoups = np.array([(3 << 64) // int(q) for q in mods], dtype=np.uint64)

    backends = {}
    for name in ("numpy", "numba"):
        try:
            backends[name] = get_kernels(name)
        except ImportError:
            out(f"backend {name} unavailable, skipping")

    cases = {
        "ntt_forward": lambda K: K.ntt_batch(
            res.copy(), basis.psi_rev[:levels], basis.psi_rev_shoup[:levels], mods
        ),
        "ntt_inverse": lambda K: K.intt_batch(
            res.copy(),
            basis.ipsi_rev[:levels],
            basis.ipsi_rev_shoup[:levels],
            basis.n_invs[:levels],
            basis.n_inv_shoups[:levels],
            mods,
        ),
        "pointwise_mul": lambda K: K.pw_mul_batch(
            res, other, mods, basis.mont_ninvs[:levels], basis.mont_r2s[:levels]
        ),
        "const_mul": lambda K: K.cmul_batch(res, consts, shoups, mods),
        "add": lambda K: K.add_batch(res, other, mods),
    }

    out(f"kernel benchmark: N={n}, levels={levels}, best of {repeats}")
    header = f"{'op':<14}" + "".join(f"{name + ' (ms)':>14}" for name in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    out(header)
    for case, make in cases.items():
        times = {}
        for name, K in backends.items():
            times[name] = _timeit(lambda K=K: make(K), repeats) * 1e3
        row = f"{case:<14}" + "".join(f"{times[name]:>14.3f}" for name in backends)
        if len(times) == 2:
            row += f"{times['numpy'] / times['numba']:>9.1f}x"
        out(row)


if __name__ == "__main__":
    run_bench()
