"""Numba-compiled modular-arithmetic kernels.

Same contracts as kernels_numpy (see that module for the math); these are
scalar loops that LLVM lowers to native 64-bit code.  Signatures are kept
loose (let numba infer) and caching is enabled so repeat test runs skip
compilation.
"""

import numpy as np
from numba import njit, uint64

_M32 = uint64(0xFFFFFFFF)


@njit(cache=True, inline="always")
def _mul_hi(a, b):
    a0 = a & _M32
    a1 = a >> uint64(32)
    b0 = b & _M32
    b1 = b >> uint64(32)
    lo = a0 * b0
    m1 = a1 * b0 + (lo >> uint64(32))
    m2 = a0 * b1 + (m1 & _M32)
    return a1 * b1 + (m1 >> uint64(32)) + (m2 >> uint64(32))


@njit(cache=True, inline="always")
def _mul_shoup(x, w, w_shoup, p):
    q = _mul_hi(x, w_shoup)
    r = x * w - q * p
    if r >= p:
        r -= p
    return r


@njit(cache=True, inline="always")
def _redc(lo, hi, p, p_ninv):
    m = lo * p_ninv
    t = hi + _mul_hi(m, p)
    if lo != uint64(0):
        t += uint64(1)
    if t >= p:
        t -= p
    return t


@njit(cache=True, inline="always")
def _mul_mod(a, b, p, p_ninv, r2):
    am = _redc(a * r2, _mul_hi(a, r2), p, p_ninv)
    return _redc(am * b, _mul_hi(am, b), p, p_ninv)


@njit(cache=True)
def _ntt_row(a, psi_rev, psi_shoup, p):
    n = a.shape[0]
    t = n
    m = 1
    while m < n:
        t >>= 1
        for i in range(m):
            j1 = 2 * i * t
            w = psi_rev[m + i]
            ws = psi_shoup[m + i]
            for j in range(j1, j1 + t):
                x = a[j]
                y = _mul_shoup(a[j + t], w, ws, p)
                s = x + y
                if s >= p:
                    s -= p
                a[j] = s
                if x >= y:
                    a[j + t] = x - y
                else:
                    a[j + t] = x + (p - y)
        m <<= 1


@njit(cache=True)
def _intt_row(a, ipsi_rev, ipsi_shoup, n_inv, n_inv_shoup, p):
    n = a.shape[0]
    m = n >> 1
    t = 1
    while m >= 1:
        for i in range(m):
            j1 = 2 * i * t
            w = ipsi_rev[m + i]
            ws = ipsi_shoup[m + i]
            for j in range(j1, j1 + t):
                x = a[j]
                y = a[j + t]
                s = x + y
                if s >= p:
                    s -= p
                a[j] = s
                if x >= y:
                    d = x - y
                else:
                    d = x + (p - y)
                a[j + t] = _mul_shoup(d, w, ws, p)
        m >>= 1
        t <<= 1
    for j in range(n):
        a[j] = _mul_shoup(a[j], n_inv, n_inv_shoup, p)


@njit(cache=True)
def ntt_batch(res, psi_rev, psi_shoup, mods):
    for i in range(res.shape[0]):
        _ntt_row(res[i], psi_rev[i], psi_shoup[i], mods[i])


@njit(cache=True)
def intt_batch(res, ipsi_rev, ipsi_shoup, n_invs, n_inv_shoups, mods):
    for i in range(res.shape[0]):
        _intt_row(res[i], ipsi_rev[i], ipsi_shoup[i], n_invs[i], n_inv_shoups[i], mods[i])


@njit(cache=True)
def pw_mul_batch(a, b, mods, ninvs, r2s):
    out = np.empty_like(a)
    for i in range(a.shape[0]):
        p = mods[i]
        pn = ninvs[i]
        r2 = r2s[i]
        for j in range(a.shape[1]):
            out[i, j] = _mul_mod(a[i, j], b[i, j], p, pn, r2)
    return out


@njit(cache=True)
def pw_mul_acc_batch(acc, a, b, mods, ninvs, r2s):
    for i in range(a.shape[0]):
        p = mods[i]
        pn = ninvs[i]
        r2 = r2s[i]
        for j in range(a.shape[1]):
            s = acc[i, j] + _mul_mod(a[i, j], b[i, j], p, pn, r2)
            if s >= p:
                s -= p
            acc[i, j] = s


@njit(cache=True)
def pw_mul_acc_rows(acc, a, b_full, rows, mods, ninvs, r2s):
    for i in range(a.shape[0]):
        r = rows[i]
        p = mods[i]
        pn = ninvs[i]
        r2 = r2s[i]
        for j in range(a.shape[1]):
            s = acc[i, j] + _mul_mod(a[i, j], b_full[r, j], p, pn, r2)
            if s >= p:
                s -= p
            acc[i, j] = s


@njit(cache=True)
def cmul_batch(a, ws, w_shoups, mods):
    out = np.empty_like(a)
    for i in range(a.shape[0]):
        p = mods[i]
        w = ws[i]
        wsh = w_shoups[i]
        for j in range(a.shape[1]):
            out[i, j] = _mul_shoup(a[i, j], w, wsh, p)
    return out


@njit(cache=True)
def add_batch(a, b, mods):
    out = np.empty_like(a)
    for i in range(a.shape[0]):
        p = mods[i]
        for j in range(a.shape[1]):
            s = a[i, j] + b[i, j]
            if s >= p:
                s -= p
            out[i, j] = s
    return out


@njit(cache=True)
def sub_batch(a, b, mods):
    out = np.empty_like(a)
    for i in range(a.shape[0]):
        p = mods[i]
        for j in range(a.shape[1]):
            x = a[i, j]
            y = b[i, j]
            if x >= y:
                out[i, j] = x - y
            else:
                out[i, j] = x + (p - y)
    return out


@njit(cache=True)
def neg_batch(a, mods):
    out = np.empty_like(a)
    for i in range(a.shape[0]):
        p = mods[i]
        for j in range(a.shape[1]):
            x = a[i, j]
            out[i, j] = uint64(0) if x == uint64(0) else p - x
    return out


@njit(cache=True, inline="always")
def _red(x, one_sh, p):
    # x mod p for x < 2^62, via the Shoup constant floor(2^64/p)
    q = _mul_hi(x, one_sh)
    r = x - q * p
    if r >= p:
        r -= p
    return r


@njit(cache=True, inline="always")
def _addm(x, y, p):
    s = x + y
    if s >= p:
        s -= p
    return s


@njit(cache=True, inline="always")
def _subm(x, y, p):
    if x >= y:
        return x - y
    return x + (p - y)


@njit(cache=True)
def ks_digit_extend(d_rows, dmods, dinv, dinv_sh, gc, gc_sh, tmods, hc, hc_sh, out):
    a = d_rows.shape[0]
    n = d_rows.shape[1]
    v = np.empty((a, n), dtype=np.uint64)
    for i in range(a):
        p = dmods[i]
        one_sh = (uint64(0) - p) // p + uint64(1)  # floor(2^64 / p)
        for col in range(n):
            t = _mul_shoup(d_rows[i, col], dinv[i], dinv_sh[i], p)
            if i > 0:
                acc = _red(v[0, col], one_sh, p)
                for j in range(1, i):
                    acc = _addm(acc, _mul_shoup(v[j, col], gc[i, j], gc_sh[i, j], p), p)
                t = _mul_shoup(_subm(t, acc, p), gc[i, i], gc_sh[i, i], p)
            v[i, col] = t
    for r in range(out.shape[0]):
        p = tmods[r]
        one_sh = (uint64(0) - p) // p + uint64(1)
        for col in range(n):
            h = _red(v[a - 1, col], one_sh, p)
            for i in range(a - 2, -1, -1):
                h = _addm(_mul_shoup(h, hc[r, i], hc_sh[r, i], p), _red(v[i, col], one_sh, p), p)
            out[r, col] = h


@njit(cache=True)
def moddown_delta(spec_rows, smods, sginv, sginv_sh, half_digits, tmods, shc, shc_sh, pmods, out):
    K = spec_rows.shape[0]
    n = spec_rows.shape[1]
    v = np.empty((K, n), dtype=np.uint64)
    for col in range(n):
        v[0, col] = spec_rows[0, col]
    for i in range(1, K):
        p = smods[i]
        for col in range(n):
            acc = v[0, col] % p
            for j in range(1, i):
                acc = _addm(acc, _mul_shoup(v[j, col], sginv[i, j], sginv_sh[i, j], p), p)
            v[i, col] = _mul_shoup(_subm(spec_rows[i, col], acc, p), sginv[i, i], sginv_sh[i, i], p)
    gt = np.zeros(n, dtype=np.uint8)
    for col in range(n):
        for i in range(K - 1, -1, -1):
            hi = half_digits[i]
            if v[i, col] > hi:
                gt[col] = 1
                break
            if v[i, col] < hi:
                break
    for r in range(out.shape[0]):
        p = tmods[r]
        pm = pmods[r]
        one_sh = (uint64(0) - p) // p + uint64(1)
        for col in range(n):
            h = _red(v[K - 1, col], one_sh, p)
            for i in range(K - 2, -1, -1):
                h = _addm(_mul_shoup(h, shc[r, i], shc_sh[r, i], p), _red(v[i, col], one_sh, p), p)
            if gt[col]:
                h = _subm(h, pm, p)
            out[r, col] = h


@njit(cache=True)
def gather_batch(a, idx, flip, mods):
    out = np.empty_like(a)
    for i in range(a.shape[0]):
        p = mods[i]
        for j in range(a.shape[1]):
            x = a[i, idx[j]]
            if flip[j] and x != uint64(0):
                out[i, j] = p - x
            else:
                out[i, j] = x
    return out
