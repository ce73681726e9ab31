"""Ring arithmetic against independent big-integer oracles.

The oracles here work with Python ints (CRT lifts, schoolbook convolution,
direct root evaluation) and never touch the RNS/NTT code paths they check.
"""

import numpy as np
import pytest

from ciphertune import ring

N8 = 8
N16 = 16
Q17 = 65537  # 17-bit prime, 1 mod 16 and 1 mod 32


def bit_reverse(x, bits):
    y = 0
    for _ in range(bits):
        y = (y << 1) | (x & 1)
        x >>= 1
    return y


def crt_lift(poly):
    """Residue matrix -> list of Python ints in [0, Q)."""
    mods = [int(q) for q in poly.basis.moduli[: poly.level]]
    Q = 1
    for q in mods:
        Q *= q
    out = []
    for j in range(poly.basis.n):
        x = 0
        for i, q in enumerate(mods):
            m = Q // q
            x += int(poly.residues[i][j]) * m * pow(m, -1, q)
        out.append(x % Q)
    return out, Q


def centered(vals, Q):
    return [v - Q if v > Q // 2 else v for v in vals]


def schoolbook_negacyclic(a, b, Q, n):
    out = [0] * n
    for i, ai in enumerate(a):
        for j, bj in enumerate(b):
            k = i + j
            if k < n:
                out[k] = (out[k] + ai * bj) % Q
            else:
                out[k - n] = (out[k - n] - ai * bj) % Q
    return out


def eval_at_odd_powers(coeffs, psi, q, n):
    """Brute-force O(N^2) evaluation in the implementation's slot order."""
    bits = n.bit_length() - 1
    out = []
    for i in range(n):
        e = 2 * bit_reverse(i, bits) + 1
        root = pow(psi, e, q)
        out.append(sum(c * pow(root, j, q) for j, c in enumerate(coeffs)) % q)
    return out


@pytest.fixture(scope="module")
def b8():
    return ring.RnsBasis([Q17], N8)


@pytest.fixture(scope="module")
def b8x3():
    primes = ring.find_ntt_primes(30, 2 * N8, 3)
    return ring.RnsBasis(primes, N8)


@pytest.fixture(scope="module")
def b16():
    primes = ring.find_ntt_primes(40, 2 * N16, 2)
    return ring.RnsBasis(primes, N16)


def rand_poly(basis, level, rng):
    return ring.sample_uniform(basis, level, rng)


class TestNtt:
    def test_zero(self, b8):
        z = ring.zero_poly(b8, 1)
        assert not ring.ntt_forward(z).residues.any()

    def test_constant(self, b8):
        c = 1234
        p = ring.const_poly(b8, 1, c)
        fwd = ring.ntt_forward(p)
        assert (fwd.residues == c).all()

    def test_matches_evaluation_oracle(self, b8):
        psi = b8.fields[0].root2n
        rng = np.random.default_rng(7)
        for _ in range(20):
            coeffs = [int(x) for x in rng.integers(0, Q17, size=N8)]
            p = ring.from_int_coeffs(b8, 1, coeffs)
            got = [int(x) for x in ring.ntt_forward(p).residues[0]]
            assert got == eval_at_odd_powers(coeffs, psi, Q17, N8)

    def test_wrong_domain_rejected(self, b8):
        p = ring.ntt_forward(ring.zero_poly(b8, 1))
        with pytest.raises(ring.RingError):
            ring.ntt_forward(p)
        with pytest.raises(ring.RingError):
            ring.ntt_inverse(ring.zero_poly(b8, 1))


class TestIntt:
    def test_roundtrip_100(self, b8x3):
        rng = np.random.default_rng(1)
        for _ in range(100):
            p = rand_poly(b8x3, 3, rng)
            back = ring.ntt_inverse(ring.ntt_forward(p))
            assert np.array_equal(back.residues, p.residues)

    def test_all_c_to_constant(self, b8):
        c = 31337
        res = np.full((1, N8), c, dtype=np.uint64)
        p = ring.RingPoly(b8, 1, ring.NTT, res)
        inv = ring.ntt_inverse(p)
        expect = np.zeros(N8, dtype=np.uint64)
        expect[0] = c
        assert np.array_equal(inv.residues[0], expect)

    def test_matches_interpolation_oracle(self, b8):
        psi = b8.fields[0].root2n
        n_inv = pow(N8, -1, Q17)
        bits = N8.bit_length() - 1
        rng = np.random.default_rng(2)
        vals = [int(x) for x in rng.integers(0, Q17, size=N8)]
        res = np.array([vals], dtype=np.uint64)
        p = ring.RingPoly(b8, 1, ring.NTT, res)
        got = [int(x) for x in ring.ntt_inverse(p).residues[0]]
        # inverse Vandermonde: a_i = N^{-1} sum_j A_j root_j^{-i}
        expect = []
        for i in range(N8):
            acc = 0
            for j, Aj in enumerate(vals):
                root = pow(psi, 2 * bit_reverse(j, bits) + 1, Q17)
                acc += Aj * pow(root, -i, Q17)
            expect.append(acc * n_inv % Q17)
        assert got == expect


class TestAddMul:
    def test_add_identity_and_inverse(self, b8x3):
        rng = np.random.default_rng(3)
        a = rand_poly(b8x3, 3, rng)
        z = ring.zero_poly(b8x3, 3)
        assert np.array_equal(ring.poly_add(a, z).residues, a.residues)
        assert not ring.poly_add(a, ring.poly_neg(a)).residues.any()

    def test_add_matches_crt_oracle(self, b8x3):
        rng = np.random.default_rng(4)
        a = rand_poly(b8x3, 3, rng)
        b = rand_poly(b8x3, 3, rng)
        s = ring.poly_add(a, b)
        av, Q = crt_lift(a)
        bv, _ = crt_lift(b)
        sv, _ = crt_lift(s)
        assert sv == [(x + y) % Q for x, y in zip(av, bv)]

    def test_mul_identity(self, b16):
        rng = np.random.default_rng(5)
        a = rand_poly(b16, 2, rng)
        one = ring.const_poly(b16, 2, 1)
        assert np.array_equal(ring.poly_mul(a, one).residues, a.residues)

    def test_negacyclic_wraparound(self, b8):
        a = ring.from_int_coeffs(b8, 1, [0] * (N8 - 1) + [1])
        x = ring.from_int_coeffs(b8, 1, [0, 1])
        prod = ring.poly_mul(a, x)
        expect = np.zeros(N8, dtype=np.uint64)
        expect[0] = Q17 - 1
        assert np.array_equal(prod.residues[0], expect)

    def test_mul_matches_schoolbook(self, b16):
        rng = np.random.default_rng(6)
        for _ in range(20):
            a = rand_poly(b16, 2, rng)
            b = rand_poly(b16, 2, rng)
            prod = ring.poly_mul(a, b)
            av, Q = crt_lift(a)
            bv, _ = crt_lift(b)
            pv, _ = crt_lift(prod)
            assert pv == schoolbook_negacyclic(av, bv, Q, N16)

    def test_ring_laws(self, b8x3):
        rng = np.random.default_rng(8)
        a = rand_poly(b8x3, 3, rng)
        b = rand_poly(b8x3, 3, rng)
        c = rand_poly(b8x3, 3, rng)
        ab = ring.poly_mul(a, b)
        ba = ring.poly_mul(b, a)
        assert np.array_equal(ab.residues, ba.residues)
        lhs = ring.poly_mul(a, ring.poly_add(b, c))
        rhs = ring.poly_add(ring.poly_mul(a, b), ring.poly_mul(a, c))
        assert np.array_equal(lhs.residues, rhs.residues)

    def test_level_mismatch_rejected(self, b8x3):
        rng = np.random.default_rng(9)
        a = rand_poly(b8x3, 3, rng)
        b = rand_poly(b8x3, 2, rng)
        with pytest.raises(ring.RingError):
            ring.poly_add(a, b)
        with pytest.raises(ring.RingError):
            ring.poly_mul(a, b)


class TestAutomorphism:
    def test_identity(self, b8x3):
        rng = np.random.default_rng(10)
        p = rand_poly(b8x3, 3, rng)
        assert np.array_equal(ring.automorphism(p, 1).residues, p.residues)

    def test_group_inverse(self, b8x3):
        rng = np.random.default_rng(11)
        p = rand_poly(b8x3, 3, rng)
        k = 5
        kinv = pow(k, -1, 2 * N8)
        back = ring.automorphism(ring.automorphism(p, k), kinv)
        assert np.array_equal(back.residues, p.residues)

    def test_substitution_oracle(self, b8):
        rng = np.random.default_rng(12)
        coeffs = [int(x) for x in rng.integers(0, Q17, size=N8)]
        p = ring.from_int_coeffs(b8, 1, coeffs)
        got = [int(x) for x in ring.automorphism(p, 5).residues[0]]
        # direct substitution: coefficient of X^j maps to +-X^(5j mod N)
        expect = [0] * N8
        for j, c in enumerate(coeffs):
            e = (5 * j) % (2 * N8)
            if e < N8:
                expect[e] = (expect[e] + c) % Q17
            else:
                expect[e - N8] = (expect[e - N8] - c) % Q17
        assert got == expect

    def test_composition_law(self, b8x3):
        rng = np.random.default_rng(13)
        p = rand_poly(b8x3, 2, rng)
        k1, k2 = 3, 5
        lhs = ring.automorphism(ring.automorphism(p, k1), k2)
        rhs = ring.automorphism(p, (k1 * k2) % (2 * N8))
        assert np.array_equal(lhs.residues, rhs.residues)

    def test_even_k_rejected(self, b8):
        with pytest.raises(ring.RingError):
            ring.automorphism(ring.zero_poly(b8, 1), 4)


class TestDropLastPrime:
    def test_zero(self, b8x3):
        out = ring.drop_last_prime(ring.zero_poly(b8x3, 3))
        assert out.level == 2 and not out.residues.any()

    def test_exact_multiple(self, b8x3):
        rng = np.random.default_rng(14)
        q_last = int(b8x3.moduli[2])
        y = [int(v) for v in rng.integers(0, 1 << 20, size=N8)]
        p = ring.from_int_coeffs(b8x3, 3, [v * q_last for v in y])
        out = ring.drop_last_prime(p)
        ov, Q2 = crt_lift(out)
        assert ov == [v % Q2 for v in y]

    def test_matches_round_divide_oracle(self, b8x3):
        rng = np.random.default_rng(15)
        q_last = int(b8x3.moduli[2])
        for _ in range(50):
            p = rand_poly(b8x3, 3, rng)
            out = ring.drop_last_prime(p)
            pv, Q = crt_lift(p)
            ov, Q2 = crt_lift(out)
            for x, o in zip(centered(pv, Q), ov):
                # round-to-nearest; q_last odd so no ties
                expect = (x + (q_last // 2 if x >= 0 else -(q_last // 2))) // q_last
                if x >= 0:
                    expect = (x + q_last // 2) // q_last
                else:
                    expect = -((-x + q_last // 2) // q_last)
                assert o == expect % Q2

    def test_half_unit_error_bound(self, b8x3):
        from fractions import Fraction

        rng = np.random.default_rng(16)
        q_last = int(b8x3.moduli[2])
        p = rand_poly(b8x3, 3, rng)
        out = ring.drop_last_prime(p)
        pv, Q = crt_lift(p)
        ov, Q2 = crt_lift(out)
        for x, o in zip(centered(pv, Q), centered(ov, Q2)):
            err = abs(Fraction(x, q_last) - o)
            assert err <= Fraction(1, 2)

    def test_level_one_rejected(self, b8):
        with pytest.raises(ring.RingError):
            ring.drop_last_prime(ring.zero_poly(b8, 1))


class TestSampling:
    def test_ternary_zero_weight(self, b8x3):
        rng = np.random.default_rng(17)
        p = ring.sample_ternary(b8x3, 3, 0, rng)
        assert not p.residues.any()

    def test_ternary_exact_weight(self, b8x3):
        rng = np.random.default_rng(18)
        p = ring.sample_ternary(b8x3, 3, 5, rng)
        vals, Q = crt_lift(p)
        nz = [v for v in centered(vals, Q) if v != 0]
        assert len(nz) == 5 and all(v in (-1, 1) for v in nz)

    def test_seed_determinism(self, b8x3):
        a = ring.sample_gaussian(b8x3, 3, 3.2, np.random.default_rng(99))
        b = ring.sample_gaussian(b8x3, 3, 3.2, np.random.default_rng(99))
        assert np.array_equal(a.residues, b.residues)
        u1 = ring.sample_uniform(b8x3, 3, np.random.default_rng(42))
        u2 = ring.sample_uniform(b8x3, 3, np.random.default_rng(42))
        assert np.array_equal(u1.residues, u2.residues)

    def test_gaussian_stddev(self):
        basis = ring.RnsBasis(ring.find_ntt_primes(30, 2 * 1024, 1), 1024)
        rng = np.random.default_rng(20)
        draws = []
        q = int(basis.moduli[0])
        for _ in range(100):  # 100 * 1024 > 1e5 draws
            p = ring.sample_gaussian(basis, 1, 3.2, rng)
            v = p.residues[0].astype(np.int64)
            v = np.where(v > q // 2, v - q, v)
            draws.append(v)
        draws = np.concatenate(draws)
        assert abs(draws.std() - 3.2) / 3.2 < 0.05

    def test_weight_exceeding_degree_rejected(self, b8):
        with pytest.raises(ring.RingError):
            ring.sample_ternary(b8, 1, N8 + 1, np.random.default_rng(0))


def test_prime_search_deterministic():
    a = ring.find_ntt_primes(40, 2 * N16, 3)
    b = ring.find_ntt_primes(40, 2 * N16, 3)
    assert a == b
    for p in a:
        assert ring.is_prime(p) and p % (2 * N16) == 1
