"""Slot packing and encrypted matrix operations.

Matrices are tiled row-major into ciphertext slots: a tile holds an R x C
block (both powers of two, R*C <= slot_count) at flat slot index row*C+col.
Matrices that participate in one product must share the column stride C, so
callers pass ``min_cols`` when planning (the trainer plans all operands with
a common stride).

Matrix product A[n,d] * B[d,c] is replicate-and-reduce over the inner
dimension: for each k, replicate A's column k across columns and B's row k
down rows, multiply slot-wise, and accumulate.  Replications are built from
a rotation, a plain mask (one level), and log2-many doubling rotations, so
the whole product consumes exactly two multiplicative levels.

Padding contract: pack() zeroes every slot outside the logical block, and
every reduction here documents which padding it relies on.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .ckks import Ciphertext, CkksContext, CkksError, KSwitchKey, PublicKey, RotationKeySet, SecretKey

# One table for the per-op tolerances and level budgets; tests assert against
# these same constants.
LEVEL_BUDGET = {
    "matmul": 2,
    "row_reduce_sum": 1,
    "scalar_mult": 1,
    "mask": 1,
}
TOLERANCE = {
    "pack_roundtrip": 2.0**-19,
    "elementwise": 2.0**-13,
    "matmul_dot_rel": 1e-4,
    "matmul_abs": 1e-3,
    "row_reduce_abs": 1e-4,
}


class LayoutError(CkksError):
    pass


def _next_pow2(x: int) -> int:
    return 1 << max(0, (x - 1).bit_length())


@dataclass(frozen=True)
class PackingPlan:
    """Tile geometry for a rows x cols matrix in slot_count slots."""

    rows: int
    cols: int
    slot_count: int
    R: int  # padded rows per tile
    C: int  # padded cols per tile (shared stride)
    tiles_r: int
    tiles_c: int

    @property
    def tile_count(self):
        return self.tiles_r * self.tiles_c

    @property
    def rotation_steps(self):
        """Every rotation any operation on this layout may request.

        Powers of two (both directions) cover reductions and broadcasts and
        let arbitrary steps decompose; the per-column and per-row alignment
        steps make single-hop replication possible when keys for them are
        provisioned (an optimization, not a correctness requirement).
        """
        steps = set()
        p = 1
        while p <= self.slot_count // 2:
            steps.add(p)
            steps.add(self.slot_count - p)
            p <<= 1
        for k in range(1, self.C):
            steps.add(k)
        for r in range(1, self.R):
            steps.add((r * self.C) % self.slot_count)
        steps.discard(0)
        return steps

    def tile_bounds(self, ti: int, tj: int):
        r0 = ti * self.R
        c0 = tj * self.C
        return r0, min(r0 + self.R, self.rows), c0, min(c0 + self.C, self.cols)


def plan_packing(
    rows: int,
    cols: int,
    slot_count: int,
    max_tile_rows: int = None,
    min_cols: int = None,
    stride: int = None,
) -> PackingPlan:
    """Smallest power-of-two padding; splits oversized matrices across tiles.

    ``min_cols`` forces a wider column stride so several matrices can share
    a layout; ``stride`` pins the stride exactly (column-tiling matrices
    wider than it); ``max_tile_rows`` caps rows per tile (batch alignment).
    """
    if rows < 1 or cols < 1:
        raise LayoutError("matrix dimensions must be >= 1")
    if stride is not None:
        if stride & (stride - 1) or not 1 <= stride <= slot_count:
            raise LayoutError("stride must be a power of two within the slot count")
        C = stride
    else:
        want_c = max(cols, min_cols or 1)
        C = min(_next_pow2(want_c), slot_count)
    R = min(_next_pow2(rows), slot_count // C)
    if max_tile_rows is not None:
        R = min(R, _next_pow2(max_tile_rows))
    R = max(R, 1)
    tiles_r = -(-rows // R)
    tiles_c = -(-cols // C)
    return PackingPlan(rows, cols, slot_count, R, C, tiles_r, tiles_c)


@dataclass(frozen=True)
class PackedMatrix:
    plan: PackingPlan
    cts: tuple  # tiles_r * tiles_c ciphertexts, row-major tile order
    level: int
    scale: float

    def __post_init__(self):
        if len(self.cts) != self.plan.tile_count:
            raise LayoutError("tile count mismatch")
        for ct in self.cts:
            if ct.level != self.level or ct.scale != self.scale:
                raise LayoutError("tiles must share level and scale")

    def tile(self, ti: int, tj: int) -> Ciphertext:
        return self.cts[ti * self.plan.tiles_c + tj]


def _tile_slots(plan: PackingPlan, matrix: np.ndarray, ti: int, tj: int) -> np.ndarray:
    block = np.zeros((plan.R, plan.C))
    r0, r1, c0, c1 = plan.tile_bounds(ti, tj)
    block[: r1 - r0, : c1 - c0] = matrix[r0:r1, c0:c1]
    vec = np.zeros(plan.slot_count)
    vec[: plan.R * plan.C] = block.ravel()
    return vec


def pack(ctx: CkksContext, matrix, plan: PackingPlan, pk: PublicKey, scale: float, seed) -> PackedMatrix:
    """Encrypt a real matrix; padding slots are exactly zero."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (plan.rows, plan.cols):
        raise LayoutError(f"matrix shape {matrix.shape} != plan ({plan.rows}, {plan.cols})")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seeds = ss.spawn(plan.tile_count)
    cts = []
    for ti in range(plan.tiles_r):
        for tj in range(plan.tiles_c):
            vec = _tile_slots(plan, matrix, ti, tj)
            pt = ctx.encode(vec, scale, ctx.L)
            cts.append(ctx.encrypt_pk(pt, pk, np.random.default_rng(seeds[ti * plan.tiles_c + tj])))
    return PackedMatrix(plan, tuple(cts), ctx.L, float(scale))


def unpack(ctx: CkksContext, pm: PackedMatrix, sk: SecretKey) -> np.ndarray:
    plan = pm.plan
    out = np.zeros((plan.rows, plan.cols))
    for ti in range(plan.tiles_r):
        for tj in range(plan.tiles_c):
            vec = ctx.decode(ctx.decrypt(pm.tile(ti, tj), sk))
            block = vec[: plan.R * plan.C].reshape(plan.R, plan.C)
            r0, r1, c0, c1 = plan.tile_bounds(ti, tj)
            out[r0:r1, c0:c1] = block[: r1 - r0, : c1 - c0]
    return out


def _col0_mask(plan: PackingPlan) -> np.ndarray:
    mask = np.zeros(plan.slot_count)
    mask[0 : plan.R * plan.C : plan.C] = 1.0
    return mask


def _row0_mask(plan: PackingPlan) -> np.ndarray:
    mask = np.zeros(plan.slot_count)
    mask[: plan.C] = 1.0
    return mask


def _replicate_col(ctx, ct, plan, k, rks, width=None):
    """Columns 0..width-1 := column k (within each row); zero beyond.

    One level, 1+log2(width) rotations; width defaults to the full stride.
    """
    width = width or plan.C
    t = ctx.rotate(ct, k, rks) if k else ct
    t = ctx.mult_by_vector(t, _col0_mask(plan))
    step = 1
    while step < width:
        t = ctx.add_ct(t, ctx.rotate(t, plan.slot_count - step, rks))
        step <<= 1
    return t


def _replicate_row(ctx, ct, plan, k, rows_out, rks):
    """Rows 0..rows_out-1 := row k.  One level, 1+log2(rows_out) rotations."""
    t = ctx.rotate(ct, k * plan.C, rks) if k else ct
    t = ctx.mult_by_vector(t, _row0_mask(plan))
    step = plan.C
    while step < rows_out * plan.C:
        t = ctx.add_ct(t, ctx.rotate(t, plan.slot_count - step, rks))
        step <<= 1
    return t


def precompute_colreps(ctx: CkksContext, A: PackedMatrix, rks: RotationKeySet, width=None):
    """Column replications of A for every inner index; reusable across products.

    ``width`` bounds the replication to the eventual output column count
    (power of two); replications built for width w serve any product whose
    right operand has at most w columns.
    """
    plan = A.plan
    reps = []
    for ti in range(plan.tiles_r):
        row = []
        for k in range(plan.cols):
            tj, kk = divmod(k, plan.C)
            row.append(_replicate_col(ctx, A.tile(ti, tj), plan, kk, rks, width))
        reps.append(row)
    return reps


def matmul(
    ctx: CkksContext,
    A: PackedMatrix,
    B,
    evk: KSwitchKey,
    rks: RotationKeySet,
    a_colreps=None,
) -> PackedMatrix:
    """A[n,d] * B[d,c]; B may be a PackedMatrix or a plain numpy matrix.

    Requires matching column strides.  Consumes LEVEL_BUDGET['matmul'] levels.
    Relies on zero padding of both operands outside their logical blocks.
    """
    pa = A.plan
    plain_b = not isinstance(B, PackedMatrix)
    if plain_b:
        B = np.asarray(B, dtype=np.float64)
        b_rows, b_cols = B.shape
        pb = plan_packing(b_rows, b_cols, pa.slot_count, min_cols=pa.C)
    else:
        pb = B.plan
        b_rows, b_cols = pb.rows, pb.cols
        if pb.C != pa.C:
            raise LayoutError(f"column stride mismatch ({pa.C} vs {pb.C})")
        if A.level != B.level:
            raise CkksError("matmul operand level mismatch")
    if pa.cols != b_rows:
        raise LayoutError(f"inner dims differ ({pa.cols} vs {b_rows})")
    if b_cols > pa.C:
        raise LayoutError("output columns exceed the shared stride")
    if A.level < LEVEL_BUDGET["matmul"] + 2:
        # +2: outputs must stay at level >= 2 (the last chain prime roughly
        # equals the scale, so level-1 slots can only hold values below ~1/2)
        raise CkksError("insufficient level budget for matmul")

    if a_colreps is None:
        a_colreps = precompute_colreps(ctx, A, rks, width=_next_pow2(b_cols))
    out_plan = PackingPlan(pa.rows, b_cols, pa.slot_count, pa.R, pa.C, pa.tiles_r, 1)
    out_tiles = []
    for ti in range(pa.tiles_r):
        acc = None
        for k in range(pa.cols):
            col = a_colreps[ti][k]
            if plain_b:
                vec = np.zeros(pa.slot_count)
                row_block = np.zeros(pa.C)
                row_block[:b_cols] = B[k, :]
                vec[: out_plan.R * pa.C] = np.tile(row_block, out_plan.R)
                term = ctx.mult_by_vector(col, vec)
            else:
                bt, kk = divmod(k, pb.R)
                rep = _replicate_row(ctx, B.tile(bt, 0), pb, kk, out_plan.R, rks)
                term = ctx.rescale(ctx.mult_ct(col, rep, evk))
            acc = term if acc is None else ctx.add_ct(acc, term)
        out_tiles.append(acc)
    return PackedMatrix(out_plan, tuple(out_tiles), out_tiles[0].level, out_tiles[0].scale)


def matmul_At_B(
    ctx: CkksContext,
    At: PackedMatrix,
    B: PackedMatrix,
    evk: KSwitchKey,
    rks: RotationKeySet,
    at_colreps=None,
) -> PackedMatrix:
    """A^T * B where At is the column-major (transposed) packing of A.

    The transposed copy is made at pack time (uploads carry both layouts),
    so this is matmul with transposed-left semantics and no encrypted
    transpose.
    """
    return matmul(ctx, At, B, evk, rks, a_colreps=at_colreps)


def row_reduce_sum(ctx: CkksContext, pm: PackedMatrix, rks: RotationKeySet) -> PackedMatrix:
    """Broadcast each row's sum across that row.

    Rotate-and-add over log2(C) steps collapses sums into column 0, a mask
    isolates it (the one level consumed), and doubling rotations broadcast.
    Padding columns must be zero beforehand: they are included in the sums.
    """
    plan = pm.plan
    if pm.level < LEVEL_BUDGET["row_reduce_sum"] + 2:
        raise CkksError("insufficient level for row_reduce_sum")
    tiles = []
    for ct in pm.cts:
        y = ct
        step = 1
        while step < plan.C:
            y = ctx.add_ct(y, ctx.rotate(y, step, rks))
            step <<= 1
        y = ctx.mult_by_vector(y, _col0_mask(plan))
        step = 1
        while step < plan.C:
            y = ctx.add_ct(y, ctx.rotate(y, plan.slot_count - step, rks))
            step <<= 1
        tiles.append(y)
    return PackedMatrix(plan, tuple(tiles), tiles[0].level, tiles[0].scale)


def scalar_mult(ctx: CkksContext, pm: PackedMatrix, k: float, out_scale: float = None) -> PackedMatrix:
    """Slot-wise scale by a plain constant; consumes one rescale."""
    tiles = tuple(ctx.mult_by_scalar(ct, k, out_scale) for ct in pm.cts)
    return PackedMatrix(pm.plan, tiles, tiles[0].level, tiles[0].scale)


def mask_block(ctx: CkksContext, pm: PackedMatrix, scale_by: float = 1.0) -> PackedMatrix:
    """Zero every slot outside the logical rows x cols block (one level)."""
    plan = pm.plan
    tiles = []
    for ti in range(plan.tiles_r):
        for tj in range(plan.tiles_c):
            r0, r1, c0, c1 = plan.tile_bounds(ti, tj)
            block = np.zeros((plan.R, plan.C))
            block[: r1 - r0, : c1 - c0] = scale_by
            vec = np.zeros(plan.slot_count)
            vec[: plan.R * plan.C] = block.ravel()
            tiles.append(ctx.mult_by_vector(pm.tile(ti, tj), vec))
    return PackedMatrix(plan, tuple(tiles), tiles[0].level, tiles[0].scale)


def mask_cols(ctx: CkksContext, pm: PackedMatrix, ncols: int) -> PackedMatrix:
    """Keep columns < ncols, zero the rest (all rows).  One level."""
    plan = pm.plan
    row = np.zeros(plan.C)
    row[: min(ncols, plan.C)] = 1.0
    vec = np.zeros(plan.slot_count)
    vec[: plan.R * plan.C] = np.tile(row, plan.R)
    tiles = tuple(ctx.mult_by_vector(ct, vec) for ct in pm.cts)
    return PackedMatrix(plan, tiles, tiles[0].level, tiles[0].scale)


def matrix_add(ctx: CkksContext, a: PackedMatrix, b: PackedMatrix) -> PackedMatrix:
    _check_layout(a, b)
    tiles = tuple(ctx.add_ct(x, y) for x, y in zip(a.cts, b.cts))
    return PackedMatrix(a.plan, tiles, a.level, a.scale)


def matrix_sub(ctx: CkksContext, a: PackedMatrix, b: PackedMatrix) -> PackedMatrix:
    _check_layout(a, b)
    tiles = tuple(ctx.sub_ct(x, y) for x, y in zip(a.cts, b.cts))
    return PackedMatrix(a.plan, tiles, a.level, a.scale)


def mod_drop(ctx: CkksContext, pm: PackedMatrix, level: int) -> PackedMatrix:
    tiles = tuple(ctx.mod_drop(ct, level) for ct in pm.cts)
    return PackedMatrix(pm.plan, tiles, level, pm.scale)


def refresh(ctx: CkksContext, pm: PackedMatrix, refresher) -> PackedMatrix:
    fresh = refresher(list(pm.cts))
    return PackedMatrix(pm.plan, tuple(fresh), fresh[0].level, fresh[0].scale)


PMX_MAGIC = b"PMX1"
PMX_VERSION = 1
_PMX_HEADER = struct.Struct("<4sBIIIIIII")


def serialize_packed(ctx: CkksContext, pm: PackedMatrix) -> bytes:
    """PMX1: plan header followed by length-prefixed ciphertext blobs."""
    plan = pm.plan
    out = bytearray(
        _PMX_HEADER.pack(
            PMX_MAGIC, PMX_VERSION, plan.rows, plan.cols, plan.R, plan.C, plan.tiles_r, plan.tiles_c, len(pm.cts)
        )
    )
    for ct in pm.cts:
        blob = ctx.serialize_ciphertext(ct)
        out += struct.pack("<Q", len(blob))
        out += blob
    return bytes(out)


def deserialize_packed(ctx: CkksContext, blob: bytes) -> PackedMatrix:
    if len(blob) < _PMX_HEADER.size:
        raise LayoutError("truncated PMX1 header")
    magic, ver, r, c, R, C, tr, tc, count = _PMX_HEADER.unpack_from(blob)
    if magic != PMX_MAGIC or ver != PMX_VERSION:
        raise LayoutError("bad PMX1 magic/version")
    plan = PackingPlan(r, c, ctx.slots, R, C, tr, tc)
    if count != plan.tile_count or R * C > ctx.slots:
        raise LayoutError("inconsistent PMX1 plan")
    off = _PMX_HEADER.size
    cts = []
    for _ in range(count):
        if off + 8 > len(blob):
            raise LayoutError("truncated PMX1 body")
        (ln,) = struct.unpack_from("<Q", blob, off)
        off += 8
        if off + ln > len(blob):
            raise LayoutError("truncated PMX1 ciphertext")
        cts.append(ctx.deserialize_ciphertext(blob[off : off + ln]))
        off += ln
    if off != len(blob):
        raise LayoutError("trailing bytes in PMX1 blob")
    return PackedMatrix(plan, tuple(cts), cts[0].level, cts[0].scale)


def _check_layout(a: PackedMatrix, b: PackedMatrix):
    pa, pb = a.plan, b.plan
    if (pa.rows, pa.cols, pa.R, pa.C, pa.tiles_r, pa.tiles_c) != (
        pb.rows,
        pb.cols,
        pb.R,
        pb.C,
        pb.tiles_r,
        pb.tiles_c,
    ):
        raise LayoutError("layout mismatch")
