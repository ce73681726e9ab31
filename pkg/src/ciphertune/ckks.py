"""Leveled RNS-CKKS: keys, encoding, encryption, and ciphertext arithmetic.

Layout conventions
------------------
* The prime chain is ``base[0..L-1] + special[0..K-1]``.  Ciphertext polys
  live on a prefix of the base chain (``level`` primes); key material lives
  on the full chain.  Rescaling drops the last active base prime.
* Ciphertext/plaintext polys are kept in NTT form; serialization converts
  to coefficient form as the wire format requires.
* Key switching uses two-prime decomposition digits: digit j covers base
  primes (2j, 2j+1) and the switching keys embed ``P * (Q/Q_j) * target``
  where P is the special-prime product.  The digit residues are multiplied
  by ``(Q/Q_j)^{-1}`` on the evaluation side, which makes the telescoping
  identity hold at every level with level-independent keys.
* Scales are float64 and additions demand bit-exact equality.  Helpers that
  multiply by plaintexts may *declare* a target scale; the declared value
  differs from the embedded one by at most ~2^-40 relative (the plaintext
  rounding), which is absorbed into the noise budget.

Security: the ``test`` profile is deliberately undersized and NOT secure;
``secure128`` keeps log2(QP) within the 128-bit bound table for its degree.
"""

import hashlib
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels_numpy as knp  # client-side helpers; hot paths go via backend
from .backend import kernels as K
from .ring import (
    COEF,
    NTT,
    RingError,
    RingPoly,
    RnsBasis,
    find_ntt_primes,
    ntt_forward,
    ntt_inverse,
    poly_add,
    poly_neg,
    poly_sub,
    pw_mul,
    sample_gaussian,
    sample_ternary,
    sample_uniform,
    scalar_mul,
    zero_poly,
)

MAGIC = b"CKX1"
FORMAT_VERSION = 1

KIND_CIPHERTEXT = 1
KIND_PLAINTEXT = 2
KIND_PUBLIC_KEY = 3
KIND_KSWITCH_KEY = 4
KIND_ROTATION_SET = 5
KIND_SECRET_KEY = 6

# 128-bit classical security: max log2(QP) per ring degree (ternary secret).
LOGQP_BOUND_128 = {1024: 27, 2048: 54, 4096: 109, 8192: 218, 16384: 438, 32768: 881}

DEFAULT_SIGMA = 3.2


class CkksError(ValueError):
    pass


class ScaleMismatch(CkksError):
    pass


class LevelExhausted(CkksError):
    pass


class ParamsMismatch(CkksError):
    pass


@dataclass(frozen=True)
class CkksParams:
    """Parameter profile: ring degree, modulus chain, default scale.

    ``base_moduli`` carry the rescaling chain (each within a factor of two
    of the default scale); ``special_moduli`` exist only for key switching.
    """

    ring_degree: int
    base_moduli: tuple
    special_moduli: tuple
    log2_scale: int
    security_profile: str
    sigma: float = DEFAULT_SIGMA
    hamming_weight: int = 0  # 0 -> N/2 default
    ks_digit_primes: int = 2  # base primes per key-switching digit

    def __post_init__(self):
        n = self.ring_degree
        if n & (n - 1) or n < 8:
            raise CkksError("ring degree must be a power of two >= 8")
        allm = self.base_moduli + self.special_moduli
        if len(set(allm)) != len(allm):
            raise CkksError("chain primes must be distinct")
        scale = 2.0**self.log2_scale
        for q in self.base_moduli:
            if not (scale / 2 < q < scale * 2):
                raise CkksError(f"base prime {q} outside 2^+-1 window of scale 2^{self.log2_scale}")
        if self.security_profile == "secure128":
            bound = LOGQP_BOUND_128.get(n)
            if bound is None or self.log2_qp() > bound:
                raise CkksError(
                    f"secure128 requires log2(QP) <= {bound} at N={n}, got {self.log2_qp():.1f}"
                )

    @property
    def slot_count(self):
        return self.ring_degree // 2

    @property
    def max_level(self):
        return len(self.base_moduli)

    @property
    def scale(self):
        return 2.0**self.log2_scale

    @property
    def secret_weight(self):
        return self.hamming_weight or self.ring_degree // 2

    def log2_qp(self):
        total = 1
        for q in self.base_moduli + self.special_moduli:
            total *= q
        return math.log2(total)

    def params_hash(self) -> bytes:
        text = "|".join(
            [
                "ckks1",
                str(self.ring_degree),
                ",".join(map(str, self.base_moduli)),
                ",".join(map(str, self.special_moduli)),
                str(self.log2_scale),
                self.security_profile,
                f"{self.sigma:.4f}",
                str(self.secret_weight),
                str(self.ks_digit_primes),
            ]
        )
        return hashlib.sha256(text.encode()).digest()[:8]

    @classmethod
    def profile(cls, name: str) -> "CkksParams":
        if name == "test":
            # Small, fast, and intentionally insecure (logQP far above the
            # 128-bit bound for N=2^13): for CI and desk-scale runs only.
            n = 1 << 13
            base = find_ntt_primes(40, 2 * n, 8)
            special = find_ntt_primes(59, 2 * n, 3)
            return cls(n, tuple(base), tuple(special), 40, "test", ks_digit_primes=4)
        if name == "toy":
            # minimal parameters for fast CLI smoke tests; insecure
            n = 1 << 9
            base = find_ntt_primes(40, 2 * n, 8)
            special = find_ntt_primes(59, 2 * n, 2, skip=base)
            return cls(n, tuple(base), tuple(special), 40, "toy")
        if name == "secure128":
            n = 1 << 15
            base = find_ntt_primes(35, 2 * n, 22)
            special = find_ntt_primes(55, 2 * n, 2)
            return cls(n, tuple(base), tuple(special), 35, "secure128")
        raise CkksError(f"unknown profile {name!r}")


@dataclass(frozen=True)
class Plaintext:
    poly: RingPoly
    scale: float
    level: int


@dataclass(frozen=True)
class Ciphertext:
    polys: tuple  # 2 RingPolys (3 transiently before relinearization), NTT form
    level: int
    scale: float
    params_hash: bytes

    def __post_init__(self):
        for p in self.polys:
            if p.level != self.level:
                raise CkksError("ciphertext poly level mismatch")


@dataclass(frozen=True)
class SecretKey:
    s: RingPoly  # NTT form over the full chain (base+special)
    params_hash: bytes


@dataclass(frozen=True)
class PublicKey:
    b: RingPoly  # NTT, base chain
    a: RingPoly
    params_hash: bytes


@dataclass(frozen=True)
class KSwitchKey:
    """Per-digit pairs (b_j, a_j), each an (L+K, N) NTT-form row matrix."""

    b: tuple  # dnum arrays over the full chain
    a: tuple
    params_hash: bytes

    @property
    def dnum(self):
        return len(self.b)


@dataclass(frozen=True)
class RotationKeySet:
    keys: dict  # step -> KSwitchKey
    params_hash: bytes

    def steps(self):
        return sorted(self.keys)


class CkksContext:
    """Precomputed tables for one parameter set (immutable, thread-safe)."""

    def __init__(self, params: CkksParams):
        self.params = params
        self.n = params.ring_degree
        self.L = len(params.base_moduli)
        self.K = len(params.special_moduli)
        self.basis = RnsBasis(list(params.base_moduli) + list(params.special_moduli), self.n)
        self.hash = params.params_hash()
        self.slots = params.slot_count
        n = self.n
        # Canonical-embedding tables: slot j <-> root zeta^(5^j mod 2N).
        g = 1
        rj = np.empty(self.slots, dtype=np.int64)
        for j in range(self.slots):
            rj[j] = g
            g = (g * 5) % (2 * n)
        self._gather = ((rj - 1) // 2).astype(np.intp)
        self._conj_gather = (n - 1 - self._gather).astype(np.intp)
        k = np.arange(n)
        self._zeta = np.exp(1j * np.pi * k / n)
        self._zeta_inv = np.conj(self._zeta)
        # Key-switch digit structure: alpha base primes per digit.  Digit j
        # covers base[j*a : (j+1)*a]; evaluation multiplies its residues by
        # (Q/Q_j)^{-1}, Garner-lifts within the digit, and spreads the lift
        # to every active modulus, so keys are level-independent.
        self.alpha = min(params.ks_digit_primes, self.L)
        self.dnum = -(-self.L // self.alpha)
        base = [int(q) for q in params.base_moduli]
        spec = [int(q) for q in params.special_moduli]
        self.Q = math.prod(base)
        self.P = math.prod(spec)
        chain = base + spec
        a = self.alpha
        self._ks_w = []  # per digit: P*(Q/Q_j) mod each chain prime (key side)
        self._dig_mods = []  # per digit: member moduli (uint64)
        self._dig_dinv = []  # per digit: (Q/Q_j)^{-1} mod each member, + shoup
        self._dig_gc = []  # per digit: in-digit Garner constants, + shoup
        self._dig_hc = []  # per digit: Horner constants (chain rows x (a-1)), + shoup
        for j in range(self.dnum):
            members = base[j * a : (j + 1) * a]
            aj = len(members)
            qj = math.prod(members)
            w = self.P * (self.Q // qj)
            self._ks_w.append([w % p for p in chain])
            self._dig_mods.append(np.array(members, dtype=np.uint64))
            dinv = np.empty(aj, dtype=np.uint64)
            dinv_sh = np.empty(aj, dtype=np.uint64)
            gc = np.zeros((aj, aj), dtype=np.uint64)
            gc_sh = np.zeros((aj, aj), dtype=np.uint64)
            for i, q in enumerate(members):
                c = pow((self.Q // qj) % q, -1, q)
                dinv[i] = c
                dinv_sh[i] = (c << 64) // q
                pref = 1
                for m in range(1, i):
                    pref = pref * members[m - 1] % q
                    gc[i, m] = pref
                    gc_sh[i, m] = (pref << 64) // q
                if i:
                    full_pref = math.prod(members[:i])
                    inv = pow(full_pref % q, -1, q)
                    gc[i, i] = inv
                    gc_sh[i, i] = (inv << 64) // q
            hc = np.zeros((len(chain), max(aj - 1, 1)), dtype=np.uint64)
            hc_sh = np.zeros_like(hc)
            for r, p in enumerate(chain):
                for i in range(aj - 1):
                    c = members[i] % p
                    hc[r, i] = c
                    hc_sh[r, i] = (c << 64) // p
            self._dig_dinv.append((dinv, dinv_sh))
            self._dig_gc.append((gc, gc_sh))
            self._dig_hc.append((hc, hc_sh))
        # ModDown constants: P^{-1} and P mod each base prime, P/2 in the
        # special-prime mixed radix, special->base Horner constants.
        self._p_inv = np.array([pow(self.P % q, -1, q) for q in base], dtype=np.uint64)
        self._p_inv_sh = np.array(
            [(int(self._p_inv[i]) << 64) // base[i] for i in range(self.L)], dtype=np.uint64
        )
        self._p_mod = np.array([self.P % q for q in base], dtype=np.uint64)
        half = self.P // 2
        half_digits = []
        rem = half
        for q in spec:
            half_digits.append(rem % q)
            rem //= q
        self._p_half_digits = np.array(half_digits, dtype=np.uint64)
        self._smods = np.array(spec, dtype=np.uint64)
        K_ = self.K
        sginv = np.zeros((K_, K_), dtype=np.uint64)
        sginv_sh = np.zeros_like(sginv)
        for i in range(1, K_):
            q = spec[i]
            pref = 1
            for m in range(1, i):
                pref = pref * spec[m - 1] % q
                sginv[i, m] = pref
                sginv_sh[i, m] = (pref << 64) // q
            inv = pow(math.prod(spec[:i]) % q, -1, q)
            sginv[i, i] = inv
            sginv_sh[i, i] = (inv << 64) // q
        self._sginv = (sginv, sginv_sh)
        shc = np.zeros((self.L, max(K_ - 1, 1)), dtype=np.uint64)
        shc_sh = np.zeros_like(shc)
        for r, q in enumerate(base):
            for i in range(K_ - 1):
                c = spec[i] % q
                shc[r, i] = c
                shc_sh[r, i] = (c << 64) // q
        self._shc = (shc, shc_sh)
        # Plaintext-side headroom guard: log2(Q_l) per level.
        self._log2q = [0.0]
        acc = 0.0
        for q in base:
            acc += math.log2(q)
            self._log2q.append(acc)
        self._ks_cache = {}
        self._auto_maps = {}
        bits = self.n.bit_length() - 1
        rev = np.zeros(self.n, dtype=np.int64)
        for i in range(self.n):
            x, y = i, 0
            for _ in range(bits):
                y = (y << 1) | (x & 1)
                x >>= 1
            rev[i] = y
        self._ntt_exps = (2 * rev + 1) % (2 * self.n)
        slot_of_exp = np.zeros(2 * self.n, dtype=np.int64)
        slot_of_exp[self._ntt_exps] = np.arange(self.n)
        self._slot_of_exp = slot_of_exp

    def _ks_level_tables(self, lvl: int):
        """Cached per-level row selections and NTT tables for key switching."""
        hit = self._ks_cache.get(lvl)
        if hit is not None:
            return hit
        rows = np.concatenate([np.arange(lvl), np.arange(self.L, self.L + self.K)])
        b = self.basis
        tables = {
            "rows": rows,
            "mods": np.ascontiguousarray(b.moduli[rows]),
            "ninvs": np.ascontiguousarray(b.mont_ninvs[rows]),
            "r2s": np.ascontiguousarray(b.mont_r2s[rows]),
            "psi": np.ascontiguousarray(b.psi_rev[rows]),
            "psi_sh": np.ascontiguousarray(b.psi_rev_shoup[rows]),
            "hc": [
                (np.ascontiguousarray(hc[rows]), np.ascontiguousarray(hc_sh[rows]))
                for hc, hc_sh in self._dig_hc
            ],
        }
        self._ks_cache[lvl] = tables
        return tables

    def _auto_map(self, g: int) -> np.ndarray:
        """NTT-domain automorphism X -> X^g as a slot permutation."""
        hit = self._auto_maps.get(g)
        if hit is None:
            hit = self._slot_of_exp[(self._ntt_exps * g) % (2 * self.n)].astype(np.int64)
            self._auto_maps[g] = hit
        return hit

    # odd automorphism exponent for a slot rotation by k
    def rot_exponent(self, k: int) -> int:
        return pow(5, k % self.slots, 2 * self.n)

    def q_at(self, level: int) -> int:
        return int(self.params.base_moduli[level - 1])

    # ------------------------------------------------------------------
    # encode / decode
    # ------------------------------------------------------------------

    def encode(self, values, scale: float, level: int) -> Plaintext:
        """Pack reals into slots via the canonical embedding (real parts only)."""
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size > self.slots:
            raise CkksError(f"{values.size} values exceed {self.slots} slots")
        if not np.all(np.isfinite(values)):
            raise CkksError("values must be finite")
        if not 1 <= level <= self.L:
            raise CkksError(f"level {level} out of range")
        vmax = float(np.max(np.abs(values))) if values.size else 0.0
        if math.log2(scale) + math.log2(vmax + 1) + 2 > self._log2q[level] - 1:
            raise CkksError("scale too large for level (would wrap the modulus)")
        z = np.zeros(self.slots, dtype=np.complex128)
        z[: values.size] = values * scale
        E = np.zeros(self.n, dtype=np.complex128)
        E[self._gather] = z
        E[self._conj_gather] = np.conj(z)
        coeffs = np.real(np.fft.fft(E) / self.n * self._zeta_inv)
        poly = self._coeffs_to_poly(coeffs, level)
        return Plaintext(ntt_forward(poly), float(scale), level)

    def encode_const(self, c: float, scale: float, level: int) -> Plaintext:
        """Constant across all slots: a single integer coefficient, no FFT."""
        m = round(float(c) * scale)
        res = np.zeros((level, self.n), dtype=np.uint64)
        for i in range(level):
            res[i, 0] = m % int(self.basis.moduli[i])
        poly = RingPoly(self.basis, level, COEF, res)
        return Plaintext(ntt_forward(poly), float(scale), level)

    def _coeffs_to_poly(self, coeffs: np.ndarray, level: int) -> RingPoly:
        amax = float(np.max(np.abs(coeffs))) if coeffs.size else 0.0
        res = np.empty((level, self.n), dtype=np.uint64)
        if amax < 2**62:
            ints = np.rint(coeffs).astype(np.int64)
            for i in range(level):
                q = np.int64(self.basis.moduli[i])
                res[i] = (ints % q).astype(np.uint64)
        else:
            ints = [int(round(float(x))) for x in coeffs]
            for i in range(level):
                q = int(self.basis.moduli[i])
                res[i] = np.array([v % q for v in ints], dtype=np.uint64)
        return RingPoly(self.basis, level, COEF, res)

    def decode(self, pt: Plaintext) -> np.ndarray:
        coeffs = self._poly_to_centered_float(pt.poly)
        E = self.n * np.fft.ifft(coeffs * self._zeta)
        return np.real(E[self._gather]) / pt.scale

    def _poly_to_centered_float(self, poly: RingPoly) -> np.ndarray:
        """Centered lift to float64 via Garner mixed-radix digits.

        Digits are computed in exact int64 arithmetic for x and for -x; per
        coefficient the smaller-magnitude side is combined in float64 (every
        term belongs to the value itself, so the result is exact to ~2^-50
        relative, far below any decode tolerance).
        """
        p = poly if poly.domain == COEF else ntt_inverse(poly)
        lvl = p.level
        mods = [int(q) for q in self.basis.moduli[:lvl]]
        pos = self._garner_digits(p.residues, lvl, mods)
        neg_res = np.stack(
            [knp.neg_mod(p.residues[i], np.uint64(mods[i])) for i in range(lvl)]
        )
        neg = self._garner_digits(neg_res, lvl, mods)
        # sign from the top digit: x > Q/2 means the centered value is negative
        use_neg = pos[-1] > np.uint64(mods[-1] // 2)
        prefix = 1.0
        out = np.zeros(self.n, dtype=np.float64)
        for i in range(lvl):
            d = np.where(use_neg, neg[i], pos[i]).astype(np.float64)
            out += d * prefix
            prefix *= float(mods[i])
        return np.where(use_neg, -out, out)

    def _garner_digits(self, residues, lvl, mods):
        digits = [residues[0].astype(np.uint64)]
        for i in range(1, lvl):
            qi = mods[i]
            acc = digits[0] % np.uint64(qi)
            pref = 1
            for j in range(1, i):
                pref = pref * mods[j - 1] % qi
                w, wsh = self.basis.shoup_const(pref, i)
                acc = knp.add_mod(knp.mul_mod_shoup(digits[j], w, wsh, np.uint64(qi)), acc, np.uint64(qi))
            diff = knp.sub_mod(residues[i], acc, np.uint64(qi))
            w, wsh = self.basis.shoup_const(self.basis.inv_prefix[i], i)
            digits.append(knp.mul_mod_shoup(diff, w, wsh, np.uint64(qi)))
        return digits

    # ------------------------------------------------------------------
    # key generation
    # ------------------------------------------------------------------

    def keygen(self, seed, rotation_steps=None):
        """Deterministic (seeded) generation of sk/pk/evk/rotation keys.

        Default rotation steps: +-2^i for every power of two up to half the
        slot count; callers may extend with packing-plan specific steps.
        """
        ss = np.random.SeedSequence(seed)
        children = ss.spawn(4)
        ext = self.L + self.K
        s_coef = sample_ternary(self.basis, ext, self.params.secret_weight, np.random.default_rng(children[0]))
        s = ntt_forward(s_coef)
        sk = SecretKey(s, self.hash)

        rng_pk = np.random.default_rng(children[1])
        a = ntt_forward(sample_uniform(self.basis, self.L, rng_pk))
        e = ntt_forward(sample_gaussian(self.basis, self.L, self.params.sigma, rng_pk))
        s_base = self._slice(s, self.L)
        b = poly_add(poly_neg(pw_mul(a, s_base)), e)
        pk = PublicKey(b, a, self.hash)

        rng_evk = np.random.default_rng(children[2])
        s2 = pw_mul(s, s)
        evk = self._make_kswitch(s2, s, rng_evk)

        if rotation_steps is None:
            rotation_steps = []
        steps = set(int(k) for k in rotation_steps)
        p = 1
        while p <= self.slots // 2:
            steps.add(p)
            steps.add(self.slots - p)  # negative rotations
            p <<= 1
        rng_rot = np.random.default_rng(children[3])
        rot = {}
        noflip = np.zeros(self.n, dtype=bool)
        ext_mods = self.basis.moduli[: self.L + self.K]
        for step in sorted(steps):
            if step % self.slots == 0:
                continue
            g = self.rot_exponent(step)
            res = K.gather_batch(s.residues, self._auto_map(g), noflip, ext_mods)
            s_rot = RingPoly(self.basis, self.L + self.K, NTT, res)
            rot[step] = self._make_kswitch(s_rot, s, rng_rot)
        rks = RotationKeySet(rot, self.hash)
        return sk, pk, evk, rks

    def _slice(self, poly: RingPoly, level: int) -> RingPoly:
        return RingPoly(self.basis, level, poly.domain, np.ascontiguousarray(poly.residues[:level]))

    def _automorph_coef(self, poly: RingPoly, g: int) -> RingPoly:
        from .ring import automorphism

        return automorphism(poly, g)

    def _make_kswitch(self, target: RingPoly, s: RingPoly, rng) -> KSwitchKey:
        """ksk_j = (-a_j s + e_j + [P*(Q/Q_j)]*target, a_j) over the full chain."""
        ext = self.L + self.K
        bs, avs = [], []
        for j in range(self.dnum):
            a_j = ntt_forward(sample_uniform(self.basis, ext, rng))
            e_j = ntt_forward(sample_gaussian(self.basis, ext, self.params.sigma, rng))
            w = scalar_mul_rows(self.basis, target, self._ks_w[j])
            b_j = poly_add(poly_add(poly_neg(pw_mul(a_j, s)), e_j), w)
            bs.append(np.ascontiguousarray(b_j.residues))
            avs.append(np.ascontiguousarray(a_j.residues))
        return KSwitchKey(tuple(bs), tuple(avs), self.hash)

    # ------------------------------------------------------------------
    # encrypt / decrypt
    # ------------------------------------------------------------------

    def encrypt_pk(self, pt: Plaintext, pk: PublicKey, rng) -> Ciphertext:
        if pk.params_hash != self.hash:
            raise ParamsMismatch("public key belongs to different parameters")
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        lvl = pt.level
        u = ntt_forward(sample_ternary(self.basis, lvl, self.params.secret_weight, rng))
        e0 = ntt_forward(sample_gaussian(self.basis, lvl, self.params.sigma, rng))
        e1 = ntt_forward(sample_gaussian(self.basis, lvl, self.params.sigma, rng))
        b = self._slice(pk.b, lvl)
        a = self._slice(pk.a, lvl)
        c0 = poly_add(poly_add(pw_mul(b, u), e0), pt.poly)
        c1 = poly_add(pw_mul(a, u), e1)
        return Ciphertext((c0, c1), lvl, pt.scale, self.hash)

    def decrypt(self, ct: Ciphertext, sk: SecretKey) -> Plaintext:
        if sk.params_hash != self.hash or ct.params_hash != self.hash:
            raise ParamsMismatch("key/ciphertext parameter mismatch")
        if len(ct.polys) != 2:
            raise CkksError("cannot decrypt unrelinearized (3-poly) ciphertext")
        s = self._slice(sk.s, ct.level)
        poly = poly_add(ct.polys[0], pw_mul(ct.polys[1], s))
        return Plaintext(poly, ct.scale, ct.level)

    # ------------------------------------------------------------------
    # arithmetic
    # ------------------------------------------------------------------

    def _check(self, *cts):
        for ct in cts:
            if ct.params_hash != self.hash:
                raise ParamsMismatch("foreign ciphertext")

    def add_ct(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        self._check(a, b)
        if a.level != b.level:
            raise CkksError(f"add level mismatch ({a.level} vs {b.level})")
        if a.scale != b.scale:
            raise ScaleMismatch(f"add scale mismatch ({a.scale} vs {b.scale})")
        polys = tuple(poly_add(x, y) for x, y in zip(a.polys, b.polys))
        return Ciphertext(polys, a.level, a.scale, self.hash)

    def sub_ct(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        self._check(a, b)
        if a.level != b.level:
            raise CkksError(f"sub level mismatch ({a.level} vs {b.level})")
        if a.scale != b.scale:
            raise ScaleMismatch(f"sub scale mismatch ({a.scale} vs {b.scale})")
        polys = tuple(poly_sub(x, y) for x, y in zip(a.polys, b.polys))
        return Ciphertext(polys, a.level, a.scale, self.hash)

    def negate(self, a: Ciphertext) -> Ciphertext:
        return Ciphertext(tuple(poly_neg(p) for p in a.polys), a.level, a.scale, self.hash)

    def add_plain(self, a: Ciphertext, pt: Plaintext) -> Ciphertext:
        self._check(a)
        if pt.level != a.level:
            raise CkksError("add_plain level mismatch")
        if pt.scale != a.scale:
            raise ScaleMismatch("add_plain scale mismatch")
        return Ciphertext((poly_add(a.polys[0], pt.poly),) + a.polys[1:], a.level, a.scale, self.hash)

    def sub_plain(self, a: Ciphertext, pt: Plaintext) -> Ciphertext:
        self._check(a)
        if pt.level != a.level or pt.scale != a.scale:
            raise ScaleMismatch("sub_plain level/scale mismatch")
        return Ciphertext((poly_sub(a.polys[0], pt.poly),) + a.polys[1:], a.level, a.scale, self.hash)

    def add_scalar(self, a: Ciphertext, c: float) -> Ciphertext:
        return self.add_plain(a, self.encode_const(c, a.scale, a.level))

    def mult_plain(self, a: Ciphertext, pt: Plaintext) -> Ciphertext:
        self._check(a)
        if pt.level != a.level:
            raise CkksError("mult_plain level mismatch")
        polys = tuple(pw_mul(p, pt.poly) for p in a.polys)
        return Ciphertext(polys, a.level, a.scale * pt.scale, self.hash)

    def mult_ct(self, a: Ciphertext, b: Ciphertext, evk: KSwitchKey) -> Ciphertext:
        self._check(a, b)
        if evk is None or evk.params_hash != self.hash:
            raise ParamsMismatch("missing/foreign evaluation key")
        if a.level != b.level:
            raise CkksError(f"mult level mismatch ({a.level} vs {b.level})")
        if a.level < 2:
            raise LevelExhausted("no level left to absorb the product scale")
        a0, a1 = a.polys
        b0, b1 = b.polys
        d0 = pw_mul(a0, b0)
        d1 = poly_add(pw_mul(a0, b1), pw_mul(a1, b0))
        d2 = pw_mul(a1, b1)
        k0, k1 = self._ks_apply(ntt_inverse(d2), evk)
        return Ciphertext(
            (poly_add(d0, k0), poly_add(d1, k1)), a.level, a.scale * b.scale, self.hash
        )

    def rescale(self, ct: Ciphertext) -> Ciphertext:
        self._check(ct)
        if ct.level < 2:
            raise LevelExhausted("rescale at level 1")
        q = self.q_at(ct.level)
        polys = tuple(self._drop_last_ntt(p) for p in ct.polys)
        return Ciphertext(polys, ct.level - 1, ct.scale / q, self.hash)

    def _drop_last_ntt(self, p: RingPoly) -> RingPoly:
        """drop_last_prime on an NTT-form poly without a full round trip."""
        lvl = p.level
        last = lvl - 1
        b = self.basis
        row = p.residues[last : last + 1].copy()
        K.intt_batch(
            row,
            b.ipsi_rev[last:lvl],
            b.ipsi_rev_shoup[last:lvl],
            b.n_invs[last:lvl],
            b.n_inv_shoups[last:lvl],
            b.moduli[last:lvl],
        )
        r = row[0]
        q_last = int(b.moduli[last])
        big = r > np.uint64((q_last - 1) // 2)
        delta = np.empty((last, self.n), dtype=np.uint64)
        ws = np.empty(last, dtype=np.uint64)
        wsh = np.empty(last, dtype=np.uint64)
        for i in range(last):
            q = int(b.moduli[i])
            d = r % np.uint64(q)
            corr = np.uint64(q_last % q)
            delta[i] = np.where(big, (d + np.uint64(q) - corr) % np.uint64(q), d)
            ws[i], wsh[i] = b.shoup_const(pow(q_last, -1, q), i)
        K.ntt_batch(delta, b.psi_rev[:last], b.psi_rev_shoup[:last], b.moduli[:last])
        mods = b.moduli[:last]
        diff = K.sub_batch(np.ascontiguousarray(p.residues[:last]), delta, mods)
        out = K.cmul_batch(diff, ws, wsh, mods)
        return RingPoly(b, last, NTT, out)

    def mod_drop(self, ct: Ciphertext, level: int) -> Ciphertext:
        """Truncate to a lower level without changing value or scale."""
        self._check(ct)
        if not 1 <= level <= ct.level:
            raise CkksError(f"mod_drop to {level} from {ct.level}")
        if level == ct.level:
            return ct
        polys = tuple(self._slice(p, level) for p in ct.polys)
        return Ciphertext(polys, level, ct.scale, self.hash)

    def mult_by_vector(self, ct: Ciphertext, values, out_scale: float = None) -> Ciphertext:
        """Slot-wise multiply by a plain vector, rescale, land exactly on out_scale.

        Encodes the vector at scale q_top * out_scale / ct.scale so the
        rescaled scale is out_scale by construction (default: keep ct.scale).
        Consumes one level.
        """
        if ct.level < 2:
            raise LevelExhausted("mult_by_vector needs a spare level")
        if out_scale is None:
            out_scale = ct.scale
        q = self.q_at(ct.level)
        pt_scale = q * out_scale / ct.scale
        pt = self.encode(values, pt_scale, ct.level)
        out = self.rescale(self.mult_plain(ct, pt))
        return Ciphertext(out.polys, out.level, float(out_scale), self.hash)

    def mult_by_scalar(self, ct: Ciphertext, c: float, out_scale: float = None) -> Ciphertext:
        """Scalar variant of mult_by_vector (constant plaintext, no FFT)."""
        if ct.level < 2:
            raise LevelExhausted("mult_by_scalar needs a spare level")
        if out_scale is None:
            out_scale = ct.scale
        q = self.q_at(ct.level)
        pt = self.encode_const(c, q * out_scale / ct.scale, ct.level)
        out = self.rescale(self.mult_plain(ct, pt))
        return Ciphertext(out.polys, out.level, float(out_scale), self.hash)

    def adjust_scale(self, ct: Ciphertext, target: float) -> Ciphertext:
        """Multiply by an encoded 1 so the scale lands exactly on target."""
        return self.mult_by_scalar(ct, 1.0, target)

    def rotate(self, ct: Ciphertext, k: int, rks: RotationKeySet) -> Ciphertext:
        """Cyclic slot rotation: slot i of output = slot (i+k mod slots) of input."""
        self._check(ct)
        if rks.params_hash != self.hash:
            raise ParamsMismatch("foreign rotation keys")
        k %= self.slots
        if k == 0:
            return ct
        for step in self._rotation_path(k, rks):
            ct = self._rotate_once(ct, step, rks.keys[step])
        return ct

    def _rotation_path(self, k: int, rks: RotationKeySet):
        if k in rks.keys:
            return [k]
        path = []
        rem = k
        bit = 1
        while rem:
            if rem & 1:
                if bit not in rks.keys:
                    raise CkksError(f"no rotation key covering step {k}")
                path.append(bit)
            rem >>= 1
            bit <<= 1
        return path

    def _rotate_once(self, ct: Ciphertext, step: int, ksk: KSwitchKey) -> Ciphertext:
        # automorphisms permute NTT slots (no signs): only c1 must leave the
        # NTT domain, for digit decomposition
        g = self.rot_exponent(step)
        idx = self._auto_map(g)
        lvl = ct.level
        mods = self.basis.moduli[:lvl]
        noflip = np.zeros(self.n, dtype=bool)
        c0 = K.gather_batch(ct.polys[0].residues, idx, noflip, mods)
        c1 = K.gather_batch(ct.polys[1].residues, idx, noflip, mods)
        c0p = RingPoly(self.basis, lvl, NTT, c0)
        d = ntt_inverse(RingPoly(self.basis, lvl, NTT, c1))
        k0, k1 = self._ks_apply(d, ksk)
        return Ciphertext((poly_add(c0p, k0), k1), ct.level, ct.scale, self.hash)

    # ------------------------------------------------------------------
    # key switching core
    # ------------------------------------------------------------------

    def _ks_apply(self, d: RingPoly, ksk: KSwitchKey):
        """Switch the key under coefficient-form poly d; returns NTT (p0, p1) at d's level."""
        lvl = d.level
        b = self.basis
        n = self.n
        tab = self._ks_level_tables(lvl)
        rows = tab["rows"]
        acc0 = np.zeros((lvl + self.K, n), dtype=np.uint64)
        acc1 = np.zeros((lvl + self.K, n), dtype=np.uint64)
        a = self.alpha
        for j in range(self.dnum):
            start = j * a
            if start >= lvl:
                break
            act = min(a, lvl - start)
            d_rows = np.ascontiguousarray(d.residues[start : start + act])
            dinv, dinv_sh = self._dig_dinv[j]
            gc, gc_sh = self._dig_gc[j]
            hc, hc_sh = tab["hc"][j]
            ext = np.empty((lvl + self.K, n), dtype=np.uint64)
            K.ks_digit_extend(
                d_rows, self._dig_mods[j][:act], dinv[:act], dinv_sh[:act], gc, gc_sh,
                tab["mods"], hc, hc_sh, ext,
            )
            K.ntt_batch(ext, tab["psi"], tab["psi_sh"], tab["mods"])
            K.pw_mul_acc_rows(acc0, ext, ksk.b[j], rows, tab["mods"], tab["ninvs"], tab["r2s"])
            K.pw_mul_acc_rows(acc1, ext, ksk.a[j], rows, tab["mods"], tab["ninvs"], tab["r2s"])
        p0 = self._mod_down(acc0, lvl)
        p1 = self._mod_down(acc1, lvl)
        return p0, p1

    def _mod_down(self, acc: np.ndarray, lvl: int) -> RingPoly:
        """Divide the (base+special) NTT accumulator by P, centered rounding.

        Only the special rows leave the NTT domain; the centered remainder is
        transformed back and subtracted in place, then scaled by P^{-1}.
        """
        b = self.basis
        rows = np.arange(self.L, self.L + self.K)
        spec = np.ascontiguousarray(acc[lvl:])
        K.intt_batch(
            spec, b.ipsi_rev[rows], b.ipsi_rev_shoup[rows], b.n_invs[rows], b.n_inv_shoups[rows], b.moduli[rows]
        )
        sginv, sginv_sh = self._sginv
        shc, shc_sh = self._shc
        delta = np.empty((lvl, self.n), dtype=np.uint64)
        K.moddown_delta(
            spec, self._smods, sginv, sginv_sh, self._p_half_digits,
            b.moduli[:lvl], shc[:lvl], shc_sh[:lvl], self._p_mod[:lvl], delta,
        )
        K.ntt_batch(delta, b.psi_rev[:lvl], b.psi_rev_shoup[:lvl], b.moduli[:lvl])
        out = K.sub_batch(np.ascontiguousarray(acc[:lvl]), delta, b.moduli[:lvl])
        out = K.cmul_batch(out, self._p_inv[:lvl], self._p_inv_sh[:lvl], b.moduli[:lvl])
        return RingPoly(b, lvl, NTT, out)

    # ------------------------------------------------------------------
    # serialization (wire format CKX1)
    # ------------------------------------------------------------------

    def serialize_ciphertext(self, ct: Ciphertext) -> bytes:
        self._check(ct)
        if len(ct.polys) != 2:
            raise CkksError("serialize expects a 2-poly ciphertext")
        return self._serialize(KIND_CIPHERTEXT, ct.level, ct.polys, ct.scale)

    def _serialize(self, kind: int, level: int, polys, scale: float) -> bytes:
        scale_fp = int(round(math.log2(scale) * 65536)) if scale > 0 else 0
        head = MAGIC + struct.pack(
            "<B8sBBBi", FORMAT_VERSION, self.hash, kind, level, len(polys), scale_fp
        )
        body = bytearray(head)
        for p in polys:
            coef = p if p.domain == COEF else ntt_inverse(p)
            body += coef.residues.astype("<u8").tobytes()
        return bytes(body)

    def deserialize_ciphertext(self, blob: bytes) -> Ciphertext:
        kind, level, polys, scale = self._deserialize(blob)
        if kind != KIND_CIPHERTEXT:
            raise CkksError(f"expected ciphertext blob, got kind {kind}")
        return Ciphertext(tuple(ntt_forward(p) for p in polys), level, scale, self.hash)

    def _deserialize(self, blob: bytes):
        if blob[:4] != MAGIC:
            raise CkksError("bad magic")
        ver, h, kind, level, npolys, scale_fp = struct.unpack("<B8sBBBi", blob[4:20])
        if ver != FORMAT_VERSION:
            raise CkksError(f"unsupported format version {ver}")
        if h != self.hash:
            raise ParamsMismatch("params hash mismatch in blob")
        if not 1 <= level <= self.L + self.K:
            raise CkksError("level out of range")
        need = 20 + npolys * level * self.n * 8
        if len(blob) != need:
            raise CkksError(f"blob length {len(blob)} != expected {need}")
        polys = []
        off = 20
        for _ in range(npolys):
            res = np.frombuffer(blob, dtype="<u8", count=level * self.n, offset=off).reshape(level, self.n).copy()
            for i in range(level):
                if res[i].max(initial=0) >= int(self.basis.moduli[i]):
                    raise CkksError("residue out of range")
            polys.append(RingPoly(self.basis, level, COEF, res.astype(np.uint64)))
            off += level * self.n * 8
        scale = 2.0 ** (scale_fp / 65536.0) if scale_fp else 0.0
        return kind, level, polys, scale

    def serialize_secret_key(self, sk: SecretKey) -> bytes:
        return self._serialize(KIND_SECRET_KEY, self.L + self.K, (sk.s,), 0.0)

    def deserialize_secret_key(self, blob: bytes) -> SecretKey:
        kind, level, polys, _ = self._deserialize(blob)
        if kind != KIND_SECRET_KEY or level != self.L + self.K:
            raise CkksError("not a secret key blob")
        return SecretKey(ntt_forward(polys[0]), self.hash)

    def serialize_public_key(self, pk: PublicKey) -> bytes:
        return self._serialize(KIND_PUBLIC_KEY, self.L, (pk.b, pk.a), 0.0)

    def deserialize_public_key(self, blob: bytes) -> PublicKey:
        kind, level, polys, _ = self._deserialize(blob)
        if kind != KIND_PUBLIC_KEY or level != self.L:
            raise CkksError("not a public key blob")
        return PublicKey(ntt_forward(polys[0]), ntt_forward(polys[1]), self.hash)

    def serialize_kswitch(self, ksk: KSwitchKey) -> bytes:
        ext = self.L + self.K
        polys = []
        for j in range(ksk.dnum):
            polys.append(RingPoly(self.basis, ext, NTT, ksk.b[j]))
            polys.append(RingPoly(self.basis, ext, NTT, ksk.a[j]))
        return self._serialize(KIND_KSWITCH_KEY, ext, polys, 0.0)

    def deserialize_kswitch(self, blob: bytes) -> KSwitchKey:
        kind, level, polys, _ = self._deserialize(blob)
        if kind != KIND_KSWITCH_KEY or level != self.L + self.K:
            raise CkksError("not a key-switch blob")
        if len(polys) % 2:
            raise CkksError("odd poly count in key-switch blob")
        bs, avs = [], []
        for j in range(len(polys) // 2):
            bs.append(np.ascontiguousarray(ntt_forward(polys[2 * j]).residues))
            avs.append(np.ascontiguousarray(ntt_forward(polys[2 * j + 1]).residues))
        return KSwitchKey(tuple(bs), tuple(avs), self.hash)

    def serialize_rotation_set(self, rks: RotationKeySet) -> bytes:
        out = bytearray(MAGIC)
        out += struct.pack("<B8sBBBi", FORMAT_VERSION, self.hash, KIND_ROTATION_SET, 0, 0, 0)
        out += struct.pack("<H", len(rks.keys))
        for step in sorted(rks.keys):
            blob = self.serialize_kswitch(rks.keys[step])
            out += struct.pack("<iQ", step, len(blob))
            out += blob
        return bytes(out)

    def deserialize_rotation_set(self, blob: bytes) -> RotationKeySet:
        if blob[:4] != MAGIC:
            raise CkksError("bad magic")
        ver, h, kind, _, _, _ = struct.unpack("<B8sBBBi", blob[4:20])
        if ver != FORMAT_VERSION or kind != KIND_ROTATION_SET:
            raise CkksError("not a rotation set blob")
        if h != self.hash:
            raise ParamsMismatch("params hash mismatch in blob")
        (count,) = struct.unpack_from("<H", blob, 20)
        off = 22
        keys = {}
        for _ in range(count):
            step, ln = struct.unpack_from("<iQ", blob, off)
            off += 12
            keys[step] = self.deserialize_kswitch(blob[off : off + ln])
            off += ln
        return RotationKeySet(keys, self.hash)


def scalar_mul_rows(basis: RnsBasis, poly: RingPoly, consts) -> RingPoly:
    """Multiply each residue row by its own Python-int constant."""
    lvl = poly.level
    ws = np.empty(lvl, dtype=np.uint64)
    wsh = np.empty(lvl, dtype=np.uint64)
    for i in range(lvl):
        ws[i], wsh[i] = basis.shoup_const(consts[i], i)
    out = K.cmul_batch(poly.residues, ws, wsh, basis.moduli[:lvl])
    return RingPoly(basis, lvl, poly.domain, out)


class LoopbackRefresher:
    """Key-holder-side ciphertext refresh: decrypt, decode, re-encode, re-encrypt.

    Values are preserved (modulo fresh encoding/encryption noise); level is
    reset to full and scale to the default.  Re-encryption randomness is
    derived deterministically from (seed, counter) so sessions replay.
    """

    def __init__(self, ctx: CkksContext, sk: SecretKey, pk: PublicKey, seed=0):
        self.ctx = ctx
        self.sk = sk
        self.pk = pk
        self.seed = int(seed)
        self.counter = 0
        self.calls = 0

    def __call__(self, cts):
        self.calls += 1
        out = []
        for ct in cts:
            values = self.ctx.decode(self.ctx.decrypt(ct, self.sk))
            pt = self.ctx.encode(values, self.ctx.params.scale, self.ctx.L)
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, self.counter]))
            self.counter += 1
            out.append(self.ctx.encrypt_pk(pt, self.pk, rng))
        return out
