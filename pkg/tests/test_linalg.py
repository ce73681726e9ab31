"""Packed-matrix operations against plaintext numpy oracles."""

import numpy as np
import pytest

from ciphertune import ckks, linalg
from ciphertune.linalg import LEVEL_BUDGET, TOLERANCE, plan_packing

from conftest import make_toy_params


@pytest.fixture(scope="module")
def mid_ctx():
    return ckks.CkksContext(make_toy_params(n=1024, levels=6))


@pytest.fixture(scope="module")
def mid_keys(mid_ctx):
    return mid_ctx.keygen(31)


def packed(ctx, pk, M, seed, **plan_kw):
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    plan = plan_packing(M.shape[0], M.shape[1], ctx.slots, **plan_kw)
    return linalg.pack(ctx, M, plan, pk, ctx.params.scale, seed)


class TestPlanPacking:
    def test_small(self):
        p = plan_packing(3, 5, 4096)
        assert (p.R, p.C, p.tile_count) == (4, 8, 1)

    def test_large_forces_tiles(self):
        p = plan_packing(512, 768, 16384)
        assert p.C == 1024 and p.R == 16
        assert p.tiles_r == 32 and p.tiles_c == 1
        assert p.R * p.C <= 16384

    def test_one_by_one(self):
        p = plan_packing(1, 1, 4096)
        assert (p.R, p.C) == (1, 1)

    def test_row_wider_than_slots_splits(self):
        p = plan_packing(2, 10000, 4096)
        assert p.C == 4096 and p.tiles_c == 3 and p.R * p.C <= 4096

    def test_deterministic(self):
        assert plan_packing(7, 9, 256) == plan_packing(7, 9, 256)

    def test_invalid(self):
        with pytest.raises(linalg.LayoutError):
            plan_packing(0, 3, 256)


class TestPackUnpack:
    def test_roundtrip(self, mid_ctx, mid_keys):
        sk, pk, _, _ = mid_keys
        rng = np.random.default_rng(0)
        M = rng.uniform(-1, 1, (7, 11))
        pm = packed(mid_ctx, pk, M, 1)
        assert np.max(np.abs(linalg.unpack(mid_ctx, pm, sk) - M)) < TOLERANCE["pack_roundtrip"]

    def test_zero_matrix(self, mid_ctx, mid_keys):
        sk, pk, _, _ = mid_keys
        pm = packed(mid_ctx, pk, np.zeros((4, 4)), 2)
        assert np.max(np.abs(linalg.unpack(mid_ctx, pm, sk))) < TOLERANCE["pack_roundtrip"]

    def test_identity_roundtrip(self, mid_ctx, mid_keys):
        sk, pk, _, _ = mid_keys
        pm = packed(mid_ctx, pk, np.eye(4), 3)
        assert np.max(np.abs(linalg.unpack(mid_ctx, pm, sk) - np.eye(4))) < TOLERANCE["pack_roundtrip"]

    def test_padding_slots_decode_to_zero(self, mid_ctx, mid_keys):
        sk, pk, _, _ = mid_keys
        M = np.ones((3, 5))
        pm = packed(mid_ctx, pk, M, 4)
        vec = mid_ctx.decode(mid_ctx.decrypt(pm.cts[0], sk))
        plan = pm.plan
        block = vec[: plan.R * plan.C].reshape(plan.R, plan.C)
        assert np.max(np.abs(block[3:, :])) < TOLERANCE["pack_roundtrip"]
        assert np.max(np.abs(block[:, 5:])) < TOLERANCE["pack_roundtrip"]
        assert np.max(np.abs(vec[plan.R * plan.C :])) < TOLERANCE["pack_roundtrip"]

    def test_dim_mismatch(self, mid_ctx, mid_keys):
        _, pk, _, _ = mid_keys
        plan = plan_packing(3, 3, mid_ctx.slots)
        with pytest.raises(linalg.LayoutError):
            linalg.pack(mid_ctx, np.zeros((4, 3)), plan, pk, mid_ctx.params.scale, 0)


class TestMatmul:
    def test_identity_plain(self, mid_ctx, mid_keys):
        sk, pk, evk, rks = mid_keys
        rng = np.random.default_rng(5)
        A = rng.uniform(-1, 1, (5, 6))
        Ap = packed(mid_ctx, pk, A, 6, min_cols=8)
        out = linalg.matmul(mid_ctx, Ap, np.eye(6), evk, rks)
        assert Ap.level - out.level == LEVEL_BUDGET["matmul"]
        got = linalg.unpack(mid_ctx, out, sk)[:, :6]
        assert np.max(np.abs(got - A)) < TOLERANCE["matmul_abs"]

    def test_dot_product(self, mid_ctx, mid_keys):
        sk, pk, evk, rks = mid_keys
        rng = np.random.default_rng(7)
        d = 16
        a = rng.uniform(0.2, 1, (1, d))
        b = rng.uniform(0.2, 1, (d, 1))
        Ap = packed(mid_ctx, pk, a, 8, min_cols=d)
        Bp = packed(mid_ctx, pk, b, 9, min_cols=d)
        out = linalg.unpack(mid_ctx, linalg.matmul(mid_ctx, Ap, Bp, evk, rks), sk)
        expect = float((a @ b)[0, 0])
        assert abs(out[0, 0] - expect) / abs(expect) < TOLERANCE["matmul_dot_rel"]

    def test_16x32_32x8(self, mid_ctx, mid_keys):
        sk, pk, evk, rks = mid_keys
        rng = np.random.default_rng(10)
        A = rng.uniform(-1, 1, (16, 32))
        B = rng.uniform(-1, 1, (32, 8))
        Ap = packed(mid_ctx, pk, A, 11, min_cols=32)
        Bp = packed(mid_ctx, pk, B, 12, min_cols=32)
        out = linalg.matmul(mid_ctx, Ap, Bp, evk, rks)
        assert Ap.level - out.level == LEVEL_BUDGET["matmul"]
        got = linalg.unpack(mid_ctx, out, sk)
        assert np.max(np.abs(got - A @ B)) < TOLERANCE["matmul_abs"]

    def test_stride_mismatch_rejected(self, mid_ctx, mid_keys):
        _, pk, evk, rks = mid_keys
        Ap = packed(mid_ctx, pk, np.ones((2, 4)), 13, min_cols=8)
        Bp = packed(mid_ctx, pk, np.ones((4, 2)), 14, min_cols=16)
        with pytest.raises(linalg.LayoutError):
            linalg.matmul(mid_ctx, Ap, Bp, evk, rks)

    def test_level_exhaustion(self, mid_ctx, mid_keys):
        _, pk, evk, rks = mid_keys
        Ap = packed(mid_ctx, pk, np.ones((2, 2)), 15)
        Bp = packed(mid_ctx, pk, np.ones((2, 2)), 16)
        low_a = linalg.mod_drop(mid_ctx, Ap, 2)
        low_b = linalg.mod_drop(mid_ctx, Bp, 2)
        with pytest.raises(ckks.CkksError):
            linalg.matmul(mid_ctx, low_a, low_b, evk, rks)


class TestMatmulAtB:
    def test_against_oracle(self, mid_ctx, mid_keys):
        sk, pk, evk, rks = mid_keys
        rng = np.random.default_rng(17)
        A = rng.uniform(-1, 1, (8, 4))
        B = rng.uniform(-1, 1, (8, 3))
        At = packed(mid_ctx, pk, A.T, 18, min_cols=8)
        Bp = packed(mid_ctx, pk, B, 19, min_cols=8)
        out = linalg.matmul_At_B(mid_ctx, At, Bp, evk, rks)
        got = linalg.unpack(mid_ctx, out, sk)
        assert np.max(np.abs(got - A.T @ B)) < TOLERANCE["matmul_abs"]

    def test_zero_left(self, mid_ctx, mid_keys):
        sk, pk, evk, rks = mid_keys
        At = packed(mid_ctx, pk, np.zeros((4, 8)), 20, min_cols=8)
        Bp = packed(mid_ctx, pk, np.ones((8, 3)), 21, min_cols=8)
        out = linalg.unpack(mid_ctx, linalg.matmul_At_B(mid_ctx, At, Bp, evk, rks), sk)
        assert np.max(np.abs(out)) < TOLERANCE["matmul_abs"]

    def test_outer_product(self, mid_ctx, mid_keys):
        sk, pk, evk, rks = mid_keys
        rng = np.random.default_rng(22)
        a = rng.uniform(-1, 1, (1, 5))  # A is 1x5, A^T B is 5x3
        b = rng.uniform(-1, 1, (1, 3))
        At = packed(mid_ctx, pk, a.T, 23, min_cols=8)
        Bp = packed(mid_ctx, pk, b, 24, min_cols=8)
        out = linalg.unpack(mid_ctx, linalg.matmul_At_B(mid_ctx, At, Bp, evk, rks), sk)
        assert np.max(np.abs(out - np.outer(a, b))) < TOLERANCE["matmul_abs"]


class TestRowReduce:
    def test_one_hot(self, mid_ctx, mid_keys):
        sk, pk, _, rks = mid_keys
        M = np.zeros((4, 6))
        M[np.arange(4), [0, 2, 4, 5]] = 1.0
        pm = packed(mid_ctx, pk, M, 25, min_cols=8)
        out = linalg.row_reduce_sum(mid_ctx, pm, rks)
        assert pm.level - out.level == LEVEL_BUDGET["row_reduce_sum"]
        got = linalg.unpack(mid_ctx, out, sk)
        assert np.max(np.abs(got - 1.0)) < TOLERANCE["row_reduce_abs"]

    def test_row_of_ones(self, mid_ctx, mid_keys):
        sk, pk, _, rks = mid_keys
        c = 6
        pm = packed(mid_ctx, pk, np.ones((3, c)), 26, min_cols=8)
        got = linalg.unpack(mid_ctx, linalg.row_reduce_sum(mid_ctx, pm, rks), sk)
        assert np.max(np.abs(got - c)) < TOLERANCE["row_reduce_abs"]

    def test_random_vs_oracle(self, mid_ctx, mid_keys):
        sk, pk, _, rks = mid_keys
        rng = np.random.default_rng(27)
        M = rng.uniform(-1, 1, (8, 5))
        pm = packed(mid_ctx, pk, M, 28, min_cols=8)
        got = linalg.unpack(mid_ctx, linalg.row_reduce_sum(mid_ctx, pm, rks), sk)
        expect = np.tile(M.sum(axis=1)[:, None], (1, 5))
        assert np.max(np.abs(got - expect)) < TOLERANCE["row_reduce_abs"]


class TestElementwise:
    def test_scalar_identity_and_zero(self, mid_ctx, mid_keys):
        sk, pk, _, _ = mid_keys
        rng = np.random.default_rng(29)
        M = rng.uniform(-1, 1, (4, 4))
        pm = packed(mid_ctx, pk, M, 30)
        one = linalg.scalar_mult(mid_ctx, pm, 1.0)
        assert pm.level - one.level == LEVEL_BUDGET["scalar_mult"]
        assert np.max(np.abs(linalg.unpack(mid_ctx, one, sk) - M)) < TOLERANCE["elementwise"]
        zero = linalg.scalar_mult(mid_ctx, pm, 0.0)
        assert np.max(np.abs(linalg.unpack(mid_ctx, zero, sk))) < TOLERANCE["elementwise"]

    def test_scalar_random(self, mid_ctx, mid_keys):
        sk, pk, _, _ = mid_keys
        rng = np.random.default_rng(31)
        M = rng.uniform(-1, 1, (4, 4))
        pm = packed(mid_ctx, pk, M, 32)
        out = linalg.scalar_mult(mid_ctx, pm, -0.37)
        assert np.max(np.abs(linalg.unpack(mid_ctx, out, sk) - (-0.37) * M)) < TOLERANCE["elementwise"]

    def test_add_sub(self, mid_ctx, mid_keys):
        sk, pk, _, _ = mid_keys
        rng = np.random.default_rng(33)
        A = rng.uniform(-1, 1, (5, 3))
        B = rng.uniform(-1, 1, (5, 3))
        Ap = packed(mid_ctx, pk, A, 34)
        Bp = packed(mid_ctx, pk, B, 35)
        s = linalg.unpack(mid_ctx, linalg.matrix_add(mid_ctx, Ap, Bp), sk)
        d = linalg.unpack(mid_ctx, linalg.matrix_sub(mid_ctx, Ap, Bp), sk)
        assert np.max(np.abs(s - (A + B))) < TOLERANCE["elementwise"]
        assert np.max(np.abs(d - (A - B))) < TOLERANCE["elementwise"]

    def test_layout_mismatch(self, mid_ctx, mid_keys):
        _, pk, _, _ = mid_keys
        Ap = packed(mid_ctx, pk, np.ones((2, 3)), 36)
        Bp = packed(mid_ctx, pk, np.ones((3, 2)), 37)
        with pytest.raises(linalg.LayoutError):
            linalg.matrix_add(mid_ctx, Ap, Bp)

    def test_mask_cols(self, mid_ctx, mid_keys):
        sk, pk, _, _ = mid_keys
        pm = packed(mid_ctx, pk, np.ones((3, 6)), 38, min_cols=8)
        out = linalg.mask_cols(mid_ctx, pm, 4)
        got = linalg.unpack(mid_ctx, out, sk)
        assert np.max(np.abs(got[:, :4] - 1.0)) < TOLERANCE["elementwise"]
        assert np.max(np.abs(got[:, 4:])) < TOLERANCE["elementwise"]


class TestInvariants:
    def test_shape_fuzz_roundtrip_ops(self, mid_ctx, mid_keys):
        """unpack(op(pack(M))) matches numpy for assorted shapes in 1..33."""
        sk, pk, _, _ = mid_keys
        rng = np.random.default_rng(40)
        for _ in range(6):
            r = int(rng.integers(1, 34))
            c = int(rng.integers(1, 34))
            M = rng.uniform(-1, 1, (r, c))
            pm = packed(mid_ctx, pk, M, int(rng.integers(1 << 30)))
            assert np.max(np.abs(linalg.unpack(mid_ctx, pm, sk) - M)) < TOLERANCE["pack_roundtrip"]
            k = float(rng.uniform(-2, 2))
            out = linalg.unpack(mid_ctx, linalg.scalar_mult(mid_ctx, pm, k), sk)
            assert np.max(np.abs(out - k * M)) < TOLERANCE["elementwise"] * max(1.0, abs(k))

    def test_rotations_subset_of_plan(self, mid_ctx, mid_keys, monkeypatch):
        sk, pk, evk, rks = mid_keys
        rng = np.random.default_rng(41)
        A = rng.uniform(-1, 1, (5, 6))
        B = rng.uniform(-1, 1, (6, 3))
        Ap = packed(mid_ctx, pk, A, 42, min_cols=8)
        Bp = packed(mid_ctx, pk, B, 43, min_cols=8)
        requested = []
        orig = ckks.CkksContext._rotate_once

        def spy(self, ct, step, ksk):
            requested.append(step)
            return orig(self, ct, step, ksk)

        monkeypatch.setattr(ckks.CkksContext, "_rotate_once", spy)
        out = linalg.matmul(mid_ctx, Ap, Bp, evk, rks)
        linalg.row_reduce_sum(mid_ctx, out, rks)
        declared = Ap.plan.rotation_steps
        assert requested and set(requested) <= declared


class TestPmxSerialization:
    def test_roundtrip_bit_exact(self, mid_ctx, mid_keys):
        _, pk, _, _ = mid_keys
        rng = np.random.default_rng(50)
        M = rng.uniform(-1, 1, (5, 7))
        pm = packed(mid_ctx, pk, M, 51)
        blob = linalg.serialize_packed(mid_ctx, pm)
        assert blob[:4] == b"PMX1"
        back = linalg.deserialize_packed(mid_ctx, blob)
        assert linalg.serialize_packed(mid_ctx, back) == blob
        assert back.plan == pm.plan and back.level == pm.level and back.scale == pm.scale

    def test_rejects_corruption(self, mid_ctx, mid_keys):
        _, pk, _, _ = mid_keys
        pm = packed(mid_ctx, pk, np.ones((2, 2)), 52)
        blob = linalg.serialize_packed(mid_ctx, pm)
        with pytest.raises(linalg.LayoutError):
            linalg.deserialize_packed(mid_ctx, blob[:-4])
        with pytest.raises(linalg.LayoutError):
            linalg.deserialize_packed(mid_ctx, b"XXXX" + blob[4:])
