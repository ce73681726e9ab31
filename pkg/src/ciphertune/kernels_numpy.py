"""Pure-numpy modular-arithmetic kernels.

All kernels operate on uint64 arrays and are exact for moduli < 2^62.
Products that would overflow 64 bits are handled with 32-bit limb splits
(for the high word) and Montgomery/Shoup reductions, so no Python bigints
and no floating point appear anywhere on this path.

Residue matrices are shaped (levels, N): one row per RNS prime.  Per-prime
constants arrive as 1-D arrays indexed by row.
"""

import numpy as np

_M32 = np.uint64(0xFFFFFFFF)
_SH32 = np.uint64(32)


def _mul_hi(a, b):
    # High 64 bits of a*b via 32-bit limbs; all intermediates fit in uint64.
    a0 = a & _M32
    a1 = a >> _SH32
    b0 = b & _M32
    b1 = b >> _SH32
    lo = a0 * b0
    m1 = a1 * b0 + (lo >> _SH32)
    m2 = a0 * b1 + (m1 & _M32)
    return a1 * b1 + (m1 >> _SH32) + (m2 >> _SH32)


def add_mod(a, b, p):
    s = a + b
    return np.where(s >= p, s - p, s)


def sub_mod(a, b, p):
    return np.where(a >= b, a - b, a + (p - b))


def neg_mod(a, p):
    return np.where(a == 0, a, p - a)


def mul_mod_shoup(x, w, w_shoup, p):
    """x*w mod p with w a precomputed constant, w_shoup = floor(w<<64 / p)."""
    q = _mul_hi(x, w_shoup)
    r = x * w - q * p
    return np.where(r >= p, r - p, r)


def _redc(lo, hi, p, p_ninv):
    # Montgomery reduction of the 128-bit value (hi, lo); result < p.
    m = lo * p_ninv
    t = hi + _mul_hi(m, p) + (lo != 0).astype(np.uint64)
    return np.where(t >= p, t - p, t)


def mul_mod(a, b, p, p_ninv, r2):
    """General a*b mod p (both operands data-dependent)."""
    am = _redc(a * r2, _mul_hi(a, r2), p, p_ninv)
    return _redc(am * b, _mul_hi(am, b), p, p_ninv)


def ntt_row(a, psi_rev, psi_shoup, p):
    """In-place forward negacyclic NTT of one residue row (length power of 2)."""
    n = a.shape[0]
    t = n
    m = 1
    while m < n:
        t >>= 1
        w = psi_rev[m : 2 * m, None]
        ws = psi_shoup[m : 2 * m, None]
        v = a.reshape(m, 2 * t)
        x = v[:, :t].copy()
        y = mul_mod_shoup(v[:, t:], w, ws, p)
        v[:, :t] = add_mod(x, y, p)
        v[:, t:] = sub_mod(x, y, p)
        m <<= 1


def intt_row(a, ipsi_rev, ipsi_shoup, n_inv, n_inv_shoup, p):
    """In-place inverse of ntt_row (stage-by-stage exact inverse)."""
    n = a.shape[0]
    m = n >> 1
    t = 1
    while m >= 1:
        w = ipsi_rev[m : 2 * m, None]
        ws = ipsi_shoup[m : 2 * m, None]
        v = a.reshape(m, 2 * t)
        x = v[:, :t].copy()
        y = v[:, t:]
        v[:, :t] = add_mod(x, y, p)
        v[:, t:] = mul_mod_shoup(sub_mod(x, y, p), w, ws, p)
        m >>= 1
        t <<= 1
    a[:] = mul_mod_shoup(a, n_inv, n_inv_shoup, p)


def ntt_batch(res, psi_rev, psi_shoup, mods):
    for i in range(res.shape[0]):
        ntt_row(res[i], psi_rev[i], psi_shoup[i], mods[i])


def intt_batch(res, ipsi_rev, ipsi_shoup, n_invs, n_inv_shoups, mods):
    for i in range(res.shape[0]):
        intt_row(res[i], ipsi_rev[i], ipsi_shoup[i], n_invs[i], n_inv_shoups[i], mods[i])


def pw_mul_batch(a, b, mods, ninvs, r2s):
    out = np.empty_like(a)
    for i in range(a.shape[0]):
        out[i] = mul_mod(a[i], b[i], mods[i], ninvs[i], r2s[i])
    return out


def pw_mul_acc_batch(acc, a, b, mods, ninvs, r2s):
    """acc += a*b (mod p), row-wise; used by key-switch inner products."""
    for i in range(a.shape[0]):
        acc[i] = add_mod(acc[i], mul_mod(a[i], b[i], mods[i], ninvs[i], r2s[i]), mods[i])


def pw_mul_acc_rows(acc, a, b_full, rows, mods, ninvs, r2s):
    """acc[i] += a[i] * b_full[rows[i]] (mod p); avoids copying key rows."""
    for i in range(a.shape[0]):
        acc[i] = add_mod(acc[i], mul_mod(a[i], b_full[rows[i]], mods[i], ninvs[i], r2s[i]), mods[i])


def cmul_batch(a, ws, w_shoups, mods):
    """Multiply each row by a per-row scalar constant."""
    out = np.empty_like(a)
    for i in range(a.shape[0]):
        out[i] = mul_mod_shoup(a[i], ws[i], w_shoups[i], mods[i])
    return out


def add_batch(a, b, mods):
    out = np.empty_like(a)
    for i in range(a.shape[0]):
        out[i] = add_mod(a[i], b[i], mods[i])
    return out


def sub_batch(a, b, mods):
    out = np.empty_like(a)
    for i in range(a.shape[0]):
        out[i] = sub_mod(a[i], b[i], mods[i])
    return out


def neg_batch(a, mods):
    out = np.empty_like(a)
    for i in range(a.shape[0]):
        out[i] = neg_mod(a[i], mods[i])
    return out


def ks_digit_extend(d_rows, dmods, dinv, dinv_sh, gc, gc_sh, tmods, hc, hc_sh, out):
    """Key-switch digit: Garner-lift d * (Q/Q_j)^{-1} and spread to out rows.

    d_rows: (a, N) residues for the digit's active primes; gc/gc_sh hold the
    in-digit Garner constants (gc[i][j] = prefix_j^{-1}-folded, see caller);
    hc/hc_sh hold per-target Horner constants (q_i mod p).  out: (R, N).
    """
    a = d_rows.shape[0]
    v = np.empty_like(d_rows)
    for i in range(a):
        p = dmods[i]
        t = mul_mod_shoup(d_rows[i], dinv[i], dinv_sh[i], p)
        acc = v[0] % p if i else None
        for j in range(1, i):
            acc = add_mod(acc, mul_mod_shoup(v[j], gc[i, j], gc_sh[i, j], p), p)
        if i:
            t = mul_mod_shoup(sub_mod(t, acc, p), gc[i, i], gc_sh[i, i], p)
        v[i] = t
    for r in range(out.shape[0]):
        p = tmods[r]
        h = v[a - 1] % p
        for i in range(a - 2, -1, -1):
            h = add_mod(mul_mod_shoup(h, hc[r, i], hc_sh[r, i], p), v[i] % p, p)
        out[r] = h


def moddown_delta(spec_rows, smods, sginv, sginv_sh, half_digits, tmods, shc, shc_sh, pmods, out):
    """Centered remainder of the special-prime part, reduced per base prime.

    spec_rows: (K, N) coefficient-form rows over the special primes.  The
    remainder is lifted by Garner, centered against P/2 (half_digits in the
    same mixed radix), and written per base prime into out: (l, N).
    """
    K = spec_rows.shape[0]
    v = np.empty_like(spec_rows)
    v[0] = spec_rows[0]
    for i in range(1, K):
        p = smods[i]
        acc = v[0] % p
        for j in range(1, i):
            acc = add_mod(acc, mul_mod_shoup(v[j], sginv[i, j], sginv_sh[i, j], p), p)
        v[i] = mul_mod_shoup(sub_mod(spec_rows[i], acc, p), sginv[i, i], sginv_sh[i, i], p)
    gt = np.zeros(spec_rows.shape[1], dtype=bool)
    eq = np.ones(spec_rows.shape[1], dtype=bool)
    for i in range(K - 1, -1, -1):
        hi = np.uint64(half_digits[i])
        gt |= eq & (v[i] > hi)
        eq &= v[i] == hi
    for r in range(out.shape[0]):
        p = tmods[r]
        h = v[K - 1] % p
        for i in range(K - 2, -1, -1):
            h = add_mod(mul_mod_shoup(h, shc[r, i], shc_sh[r, i], p), v[i] % p, p)
        out[r] = np.where(gt, sub_mod(h, np.uint64(pmods[r]), p), h)


def gather_batch(a, idx, flip, mods):
    """out[i, j] = +-a[i, idx[j]] with sign flips reduced per row's modulus."""
    out = np.empty_like(a)
    for i in range(a.shape[0]):
        row = a[i][idx]
        out[i] = np.where(flip & (row != 0), mods[i] - row, row)
    return out
