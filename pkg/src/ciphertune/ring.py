"""Exact polynomial arithmetic in Z_q[X]/(X^N + 1) under a residue number system.

Every value is a matrix of residues, one row per active prime of an ordered
chain.  Multiplication goes through the negacyclic NTT; all arithmetic is
exact 64-bit integer work (big integers appear only in test oracles).
Values are immutable after construction, so everything here is safe to share
across threads.
"""

from dataclasses import dataclass, field

import numpy as np

from .backend import kernels as K

_SMALL_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


class RingError(ValueError):
    """Domain/level/basis mismatch or invalid ring parameter."""


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin, valid for n < 2^64."""
    if n < 2:
        return False
    for p in _SMALL_PRIMES:
        if n % p == 0:
            return n == p
    d = n - 1
    r = 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for a in _SMALL_PRIMES:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def find_ntt_primes(bits: int, two_n: int, count: int, skip=()) -> list[int]:
    """The `count` NTT-friendly primes (p = 1 mod two_n) nearest 2^bits.

    Deterministic: candidates are scanned outward from 2^bits alternating
    above/below, so a (bits, two_n, count) triple always yields the same list.
    """
    target = 1 << bits
    found = []
    step = 0
    while len(found) < count:
        step += 1
        for cand in (target + step * two_n + 1, target - step * two_n + 1):
            if cand > 2 and cand not in skip and cand not in found and is_prime(cand):
                found.append(cand)
                if len(found) == count:
                    break
    return found


def _bit_reverse(x: int, bits: int) -> int:
    y = 0
    for _ in range(bits):
        y = (y << 1) | (x & 1)
        x >>= 1
    return y


def _shoup(w: int, p: int) -> int:
    return (w << 64) // p


def _primitive_2n_root(p: int, two_n: int) -> int:
    # r = c^((p-1)/2n) is a 2n-th root; primitive iff r^n = -1.
    n = two_n // 2
    exp = (p - 1) // two_n
    for c in range(2, 1000):
        r = pow(c, exp, p)
        if pow(r, n, p) == p - 1:
            return r
    raise RingError(f"no primitive {two_n}-th root found mod {p}")


@dataclass(frozen=True)
class PrimeField:
    """One 64-bit NTT prime with its precomputed twiddle tables.

    Tables are in bit-reversed order as consumed by the merged negacyclic
    butterflies; `psi_rev[m+i]` is the twiddle of block i at stage m.
    """

    modulus: int
    n: int
    root2n: int
    mont_ninv: int  # -modulus^{-1} mod 2^64
    mont_r2: int  # 2^128 mod modulus
    n_inv: int
    psi_rev: np.ndarray = field(repr=False)
    psi_rev_shoup: np.ndarray = field(repr=False)
    ipsi_rev: np.ndarray = field(repr=False)
    ipsi_rev_shoup: np.ndarray = field(repr=False)
    n_inv_shoup: int = 0

    @classmethod
    def build(cls, modulus: int, n: int) -> "PrimeField":
        if not is_prime(modulus):
            raise RingError(f"{modulus} is not prime")
        if modulus % (2 * n) != 1:
            raise RingError(f"{modulus} != 1 mod {2 * n}")
        if modulus.bit_length() > 62:
            raise RingError("primes above 62 bits overflow the reduction scheme")
        root = _primitive_2n_root(modulus, 2 * n)
        bits = n.bit_length() - 1
        psi = [pow(root, i, modulus) for i in range(n)]
        ipsi = [pow(x, -1, modulus) for x in psi]
        psi_rev = np.array([psi[_bit_reverse(i, bits)] for i in range(n)], dtype=np.uint64)
        ipsi_rev = np.array([ipsi[_bit_reverse(i, bits)] for i in range(n)], dtype=np.uint64)
        n_inv = pow(n, -1, modulus)
        fld = cls(
            modulus=modulus,
            n=n,
            root2n=root,
            mont_ninv=(-pow(modulus, -1, 1 << 64)) % (1 << 64),
            mont_r2=(1 << 128) % modulus,
            n_inv=n_inv,
            psi_rev=psi_rev,
            psi_rev_shoup=np.array([_shoup(int(w), modulus) for w in psi_rev], dtype=np.uint64),
            ipsi_rev=ipsi_rev,
            ipsi_rev_shoup=np.array([_shoup(int(w), modulus) for w in ipsi_rev], dtype=np.uint64),
            n_inv_shoup=_shoup(n_inv, modulus),
        )
        return fld


class RnsBasis:
    """Ordered chain of NTT primes over a fixed power-of-two ring degree.

    A value at level L uses the first L primes of the chain.  The chain may
    include trailing key-switching primes beyond the ciphertext range; the
    ring layer does not distinguish them.
    """

    def __init__(self, moduli: list[int], n: int):
        if n & (n - 1) or n < 2:
            raise RingError("ring degree must be a power of two >= 2")
        if len(set(moduli)) != len(moduli):
            raise RingError("chain primes must be pairwise distinct")
        self.n = n
        self.fields = tuple(PrimeField.build(q, n) for q in moduli)
        self.moduli = np.array(moduli, dtype=np.uint64)
        self.mont_ninvs = np.array([f.mont_ninv for f in self.fields], dtype=np.uint64)
        self.mont_r2s = np.array([f.mont_r2 for f in self.fields], dtype=np.uint64)
        self.psi_rev = np.stack([f.psi_rev for f in self.fields])
        self.psi_rev_shoup = np.stack([f.psi_rev_shoup for f in self.fields])
        self.ipsi_rev = np.stack([f.ipsi_rev for f in self.fields])
        self.ipsi_rev_shoup = np.stack([f.ipsi_rev_shoup for f in self.fields])
        self.n_invs = np.array([f.n_inv for f in self.fields], dtype=np.uint64)
        self.n_inv_shoups = np.array([f.n_inv_shoup for f in self.fields], dtype=np.uint64)
        # Garner mixed-radix constants: inv_prefix[i] = (q_0*...*q_{i-1})^{-1} mod q_i
        self.inv_prefix = []
        for i, q in enumerate(moduli):
            prod = 1
            for j in range(i):
                prod = prod * moduli[j] % q
            self.inv_prefix.append(pow(prod, -1, q) if i else 1)

    def __len__(self):
        return len(self.fields)

    def product(self, level: int) -> int:
        out = 1
        for q in self.moduli[:level]:
            out *= int(q)
        return out

    def shoup_const(self, c: int, row: int) -> tuple[np.uint64, np.uint64]:
        q = int(self.moduli[row])
        c %= q
        return np.uint64(c), np.uint64(_shoup(c, q))


COEF = "coef"
NTT = "ntt"


class RingPoly:
    """Immutable ring element: residue rows for the first `level` chain primes."""

    __slots__ = ("basis", "level", "domain", "residues")

    def __init__(self, basis: RnsBasis, level: int, domain: str, residues: np.ndarray):
        if residues.shape != (level, basis.n):
            raise RingError(f"residue shape {residues.shape} != ({level}, {basis.n})")
        if residues.dtype != np.uint64:
            raise RingError("residues must be uint64")
        if domain not in (COEF, NTT):
            raise RingError(f"bad domain {domain!r}")
        residues.flags.writeable = False
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "level", level)
        object.__setattr__(self, "domain", domain)
        object.__setattr__(self, "residues", residues)

    def __setattr__(self, *a):
        raise AttributeError("RingPoly is immutable")

    def _mods(self):
        return self.basis.moduli[: self.level]

    def mutable_copy(self) -> np.ndarray:
        out = self.residues.copy()
        out.flags.writeable = True
        return out


def zero_poly(basis: RnsBasis, level: int, domain: str = COEF) -> RingPoly:
    return RingPoly(basis, level, domain, np.zeros((level, basis.n), dtype=np.uint64))


def const_poly(basis: RnsBasis, level: int, c: int) -> RingPoly:
    """Constant polynomial c (a Python int, any sign), coefficient form."""
    res = np.zeros((level, basis.n), dtype=np.uint64)
    for i in range(level):
        res[i, 0] = c % int(basis.moduli[i])
    return RingPoly(basis, level, COEF, res)


def from_int_coeffs(basis: RnsBasis, level: int, coeffs) -> RingPoly:
    """Build from signed integer coefficients (list of Python ints)."""
    n = basis.n
    if len(coeffs) > n:
        raise RingError("too many coefficients")
    res = np.zeros((level, n), dtype=np.uint64)
    for i in range(level):
        q = int(basis.moduli[i])
        res[i, : len(coeffs)] = np.array([int(c) % q for c in coeffs], dtype=np.uint64)
    return RingPoly(basis, level, COEF, res)


def _check_pair(a: RingPoly, b: RingPoly, need_domain=True):
    if a.basis is not b.basis:
        raise RingError("basis mismatch")
    if a.level != b.level:
        raise RingError(f"level mismatch ({a.level} vs {b.level})")
    if need_domain and a.domain != b.domain:
        raise RingError(f"domain mismatch ({a.domain} vs {b.domain})")


def ntt_forward(p: RingPoly) -> RingPoly:
    """Negacyclic NTT per prime.

    Output ordering contract: slot i holds the evaluation at
    root2n^(2*bitrev(i, log2 N) + 1).  Pointwise products in this domain
    are exactly products in Z_q[X]/(X^N+1).
    """
    if p.domain != COEF:
        raise RingError("ntt_forward expects coefficient form")
    b = p.basis
    res = p.mutable_copy()
    K.ntt_batch(res, b.psi_rev[: p.level], b.psi_rev_shoup[: p.level], b.moduli[: p.level])
    return RingPoly(b, p.level, NTT, res)


def ntt_inverse(p: RingPoly) -> RingPoly:
    if p.domain != NTT:
        raise RingError("ntt_inverse expects ntt form")
    b = p.basis
    res = p.mutable_copy()
    K.intt_batch(
        res,
        b.ipsi_rev[: p.level],
        b.ipsi_rev_shoup[: p.level],
        b.n_invs[: p.level],
        b.n_inv_shoups[: p.level],
        b.moduli[: p.level],
    )
    return RingPoly(b, p.level, COEF, res)


def poly_add(a: RingPoly, b: RingPoly) -> RingPoly:
    _check_pair(a, b)
    return RingPoly(a.basis, a.level, a.domain, K.add_batch(a.residues, b.residues, a._mods()))


def poly_sub(a: RingPoly, b: RingPoly) -> RingPoly:
    _check_pair(a, b)
    return RingPoly(a.basis, a.level, a.domain, K.sub_batch(a.residues, b.residues, a._mods()))


def poly_neg(a: RingPoly) -> RingPoly:
    return RingPoly(a.basis, a.level, a.domain, K.neg_batch(a.residues, a._mods()))


def poly_mul(a: RingPoly, b: RingPoly) -> RingPoly:
    """Negacyclic product; transforms operands to ntt form as needed."""
    _check_pair(a, b, need_domain=False)
    an = a if a.domain == NTT else ntt_forward(a)
    bn = b if b.domain == NTT else ntt_forward(b)
    basis = a.basis
    lvl = a.level
    out = K.pw_mul_batch(
        an.residues,
        bn.residues,
        basis.moduli[:lvl],
        basis.mont_ninvs[:lvl],
        basis.mont_r2s[:lvl],
    )
    prod = RingPoly(basis, lvl, NTT, out)
    return prod if a.domain == NTT else ntt_inverse(prod)


def pw_mul(a: RingPoly, b: RingPoly) -> RingPoly:
    """Pointwise product of two ntt-form polys (no domain conversion)."""
    _check_pair(a, b)
    if a.domain != NTT:
        raise RingError("pw_mul expects ntt form")
    basis = a.basis
    lvl = a.level
    out = K.pw_mul_batch(
        a.residues,
        b.residues,
        basis.moduli[:lvl],
        basis.mont_ninvs[:lvl],
        basis.mont_r2s[:lvl],
    )
    return RingPoly(basis, lvl, NTT, out)


def scalar_mul(a: RingPoly, c: int) -> RingPoly:
    """Multiply by a Python-int constant (reduced per prime)."""
    basis = a.basis
    ws = np.empty(a.level, dtype=np.uint64)
    wsh = np.empty(a.level, dtype=np.uint64)
    for i in range(a.level):
        ws[i], wsh[i] = basis.shoup_const(c, i)
    out = K.cmul_batch(a.residues, ws, wsh, a._mods())
    return RingPoly(basis, a.level, a.domain, out)


def automorphism(p: RingPoly, k: int) -> RingPoly:
    """X -> X^k for odd k, with the negacyclic sign rule.

    Coefficient j lands at (j*k mod N) with sign flipped when j*k mod 2N >= N.
    Accepts coefficient form only; ntt-form callers convert explicitly.
    """
    if k % 2 == 0:
        raise RingError("automorphism exponent must be odd")
    n = p.basis.n
    k %= 2 * n
    if p.domain != COEF:
        raise RingError("automorphism expects coefficient form")
    j = np.arange(n, dtype=np.int64)
    jk = (j * k) % (2 * n)
    dest = jk % n
    flip = jk >= n
    out = np.zeros_like(p.residues)
    src = p.residues
    mods = p._mods()
    for i in range(p.level):
        row = np.zeros(n, dtype=np.uint64)
        row[dest] = src[i]
        neg = np.zeros(n, dtype=bool)
        neg[dest] = flip
        q = mods[i]
        out[i] = np.where(neg & (row != 0), q - row, row)
    return RingPoly(p.basis, p.level, COEF, out)


def drop_last_prime(p: RingPoly) -> RingPoly:
    """Divide by the last active prime with round-to-nearest.

    Output residues represent round(x / q_last) in the remaining basis;
    exact because the centered remainder of an odd modulus is unique.
    """
    if p.level < 2:
        raise RingError("cannot drop below one prime")
    if p.domain != COEF:
        raise RingError("drop_last_prime expects coefficient form")
    basis = p.basis
    last = p.level - 1
    q_last = int(basis.moduli[last])
    r = p.residues[last]
    half = np.uint64((q_last - 1) // 2)
    big = r > half  # centered remainder is r - q_last for these
    delta = np.empty((last, basis.n), dtype=np.uint64)
    ws = np.empty(last, dtype=np.uint64)
    wsh = np.empty(last, dtype=np.uint64)
    for i in range(last):
        q = int(basis.moduli[i])
        d = r % np.uint64(q)
        corr = np.uint64(q_last % q)
        delta[i] = np.where(big, (d + np.uint64(q) - corr) % np.uint64(q), d)
        ws[i], wsh[i] = basis.shoup_const(pow(q_last, -1, q), i)
    mods = basis.moduli[:last]
    diff = K.sub_batch(np.ascontiguousarray(p.residues[:last]), delta, mods)
    out = K.cmul_batch(diff, ws, wsh, mods)
    return RingPoly(basis, last, COEF, out)


def sample_ternary(basis: RnsBasis, level: int, hamming_weight: int, rng: np.random.Generator) -> RingPoly:
    """Ternary polynomial with exactly `hamming_weight` nonzero (+-1) coefficients."""
    n = basis.n
    if hamming_weight > n:
        raise RingError("hamming weight exceeds ring degree")
    coeffs = np.zeros(n, dtype=np.int64)
    idx = rng.choice(n, size=hamming_weight, replace=False)
    coeffs[idx] = rng.integers(0, 2, size=hamming_weight) * 2 - 1
    return _from_small_signed(basis, level, coeffs)


def sample_gaussian(basis: RnsBasis, level: int, sigma: float, rng: np.random.Generator) -> RingPoly:
    """Discrete (rounded) Gaussian with standard deviation sigma."""
    coeffs = np.rint(rng.normal(0.0, sigma, size=basis.n)).astype(np.int64)
    return _from_small_signed(basis, level, coeffs)


def sample_uniform(basis: RnsBasis, level: int, rng: np.random.Generator) -> RingPoly:
    """Uniform element of R_Q (independent uniform residues per prime = CRT-uniform)."""
    res = np.empty((level, basis.n), dtype=np.uint64)
    for i in range(level):
        res[i] = rng.integers(0, int(basis.moduli[i]), size=basis.n, dtype=np.uint64)
    return RingPoly(basis, level, COEF, res)


def _from_small_signed(basis: RnsBasis, level: int, coeffs: np.ndarray) -> RingPoly:
    res = np.empty((level, basis.n), dtype=np.uint64)
    for i in range(level):
        q = np.int64(basis.moduli[i])
        res[i] = np.where(coeffs < 0, coeffs + q, coeffs).astype(np.uint64)
    return RingPoly(basis, level, COEF, res)
