"""Polynomial approximations evaluated under encryption.

exp is a Chebyshev interpolant evaluated with baby-step/giant-step over the
Chebyshev recurrence; reciprocals use Goldschmidt's iteration; softmax is
exp -> mask/normalize -> row-sum -> reciprocal -> product.

Level discipline: ciphertext-by-ciphertext products happen only at level 3
or above.  When a computation would sink lower, the optional ``refresher``
callback (key-owner round trip) restores full level; without one the
operation raises LevelExhausted, as data-carrying ciphertexts below level 2
can wrap the modulus.

Every encrypted routine has a float64 mirror (same coefficients, same
iteration count) used by the trainer's oracle and by tests to isolate FHE
noise from approximation error.
"""

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import chebyshev as C

from .ckks import CkksContext, CkksError, LevelExhausted
from .linalg import PackedMatrix, mod_drop, row_reduce_sum

FIT_GRID = 20001  # dense-sampling resolution for measured sup-norm error
MIN_MULT_LEVEL = 3  # ct*ct products only at or above this level


class ApproxError(CkksError):
    pass


@dataclass(frozen=True)
class ChebyshevPoly:
    degree: int
    lo: float
    hi: float
    coeffs: tuple  # Chebyshev-basis coefficients on [lo, hi]
    max_error: float  # measured sup-norm vs the fitted target

    def __call__(self, x):
        """Plaintext evaluation (the oracle mirror of eval_poly_enc)."""
        x = np.asarray(x, dtype=np.float64)
        u = (2.0 * x - (self.hi + self.lo)) / (self.hi - self.lo)
        return C.chebval(u, np.asarray(self.coeffs))


def fit_chebyshev(target, lo: float, hi: float, degree: int) -> ChebyshevPoly:
    """Chebyshev interpolant at Chebyshev nodes; sup-norm error measured."""
    if not (lo < hi) or not (math.isfinite(lo) and math.isfinite(hi)):
        raise ApproxError(f"degenerate interval [{lo}, {hi}]")
    if degree < 1:
        raise ApproxError("degree must be >= 1")
    series = C.Chebyshev.interpolate(lambda u: target((hi - lo) * u / 2 + (hi + lo) / 2), degree)
    coeffs = tuple(float(c) for c in series.coef)
    grid = np.linspace(lo, hi, FIT_GRID)
    fitted = C.chebval((2 * grid - (hi + lo)) / (hi - lo), series.coef)
    err = float(np.max(np.abs(fitted - target(grid))))
    return ChebyshevPoly(degree, float(lo), float(hi), coeffs, err)


@dataclass(frozen=True)
class SoftmaxConfig:
    """Knobs for the encrypted softmax.

    The reciprocal's analytic relative error is (1 - s_min/M)^(2^k) with
    s_min = classes * exp(-logit_bound); defaults keep that below 1e-4 for
    the whole admissible logit box.
    """

    logit_bound: float
    exp_degree: int
    goldschmidt_iters: int
    denom_bound: float
    classes: int

    def __post_init__(self):
        if self.logit_bound <= 0 or self.goldschmidt_iters < 1:
            raise ApproxError("logit_bound > 0 and at least one iteration required")
        if self.denom_bound < self.classes * math.exp(self.logit_bound):
            raise ApproxError("denom_bound must cover classes * e^logit_bound")

    @classmethod
    def default(cls, classes: int, logit_bound: float = 4.0) -> "SoftmaxConfig":
        M = 1.05 * classes * math.exp(logit_bound)
        x_min = classes * math.exp(-logit_bound) / M
        # smallest k with (1-x_min)^(2^k) < 1e-4
        k = max(1, math.ceil(math.log2(math.log(1e-4) / math.log1p(-x_min))))
        return cls(float(logit_bound), 15, k, M, classes)

    def exp_cheb(self) -> ChebyshevPoly:
        return fit_chebyshev(np.exp, -self.logit_bound, self.logit_bound, self.exp_degree)

    def reciprocal_rel_error_bound(self) -> float:
        x_min = self.classes * math.exp(-self.logit_bound) / self.denom_bound
        return (1.0 - x_min) ** (2**self.goldschmidt_iters)

    def to_dict(self):
        return {
            "logit_bound": self.logit_bound,
            "exp_degree": self.exp_degree,
            "goldschmidt_iters": self.goldschmidt_iters,
            "denom_bound": self.denom_bound,
            "classes": self.classes,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            float(d["logit_bound"]),
            int(d["exp_degree"]),
            int(d["goldschmidt_iters"]),
            float(d["denom_bound"]),
            int(d["classes"]),
        )


# ----------------------------------------------------------------------
# level management
# ----------------------------------------------------------------------


def _ensure_level(ctx, cts, need, refresher):
    """Refresh the whole batch if any ct sits below `need` levels."""
    if min(ct.level for ct in cts) >= need:
        return cts
    if refresher is None:
        raise LevelExhausted(
            f"need level {need} but have {min(ct.level for ct in cts)} and no refresh channel"
        )
    return refresher(list(cts))


def _align_mult(ctx, a, b, evk):
    lvl = min(a.level, b.level)
    return ctx.rescale(ctx.mult_ct(ctx.mod_drop(a, lvl), ctx.mod_drop(b, lvl), evk))


def _mult_batch(ctx, A, B, evk, refresher):
    """Pairwise ct*ct across two tile lists, refreshing together if needed."""
    joined = _ensure_level(ctx, list(A) + list(B), MIN_MULT_LEVEL, refresher)
    A, B = joined[: len(A)], joined[len(A) :]
    return [_align_mult(ctx, a, b, evk) for a, b in zip(A, B)], A, B


# ----------------------------------------------------------------------
# encrypted Chebyshev evaluation (baby-step / giant-step)
# ----------------------------------------------------------------------


def eval_poly_enc(ctx, ct, p: ChebyshevPoly, evk, rks=None, refresher=None):
    """Slot-wise p(x) for slots within [p.lo, p.hi] (caller's contract)."""
    return _eval_poly_batch(ctx, [ct], p, evk, refresher)[0]


def _eval_poly_batch(ctx, cts, p: ChebyshevPoly, evk, refresher):
    coeffs = np.asarray(p.coeffs, dtype=np.float64)
    deg = len(coeffs) - 1
    scale = ctx.params.scale
    cts = _ensure_level(ctx, cts, MIN_MULT_LEVEL, refresher)
    # affine map into [-1, 1]
    a = 2.0 / (p.hi - p.lo)
    b = -(p.hi + p.lo) / (p.hi - p.lo)
    u = [ctx.add_scalar(ctx.mult_by_scalar(ct, a, scale), b) for ct in cts]
    if deg == 0:
        zero = [ctx.mult_by_scalar(t, 0.0, scale) for t in _ensure_level(ctx, u, MIN_MULT_LEVEL, refresher)]
        return [ctx.add_scalar(z, float(coeffs[0])) for z in zero]

    bs = 1 << max(1, (deg + 1).bit_length() // 2)  # baby-step count ~ sqrt(deg)
    T = {1: u}
    for j in range(2, bs):
        T[j] = _cheb_product(ctx, T, j, evk, refresher)
    g = bs
    while g <= deg:
        T[g] = _cheb_product(ctx, T, g, evk, refresher)
        g <<= 1
    out = _eval_rec(ctx, coeffs, T, bs, evk, refresher, scale)
    return out


def _cheb_product(ctx, T, j, evk, refresher):
    """T_j from T_{j//2} (and T_1 for odd j): T_{m+n} = 2 T_m T_n - T_{|m-n|}.

    Doubling lands exactly on the default scale, so the trailing -T_{|m-n|}
    (a constant for even j, T_1 for odd j) subtracts cleanly.
    """
    h = j // 2
    if j % 2 == 0:
        prod, _, _ = _mult_batch(ctx, T[h], T[h], evk, refresher)
        doubled = [ctx.mult_by_scalar(t, 2.0, ctx.params.scale) for t in _ensure_level(ctx, prod, MIN_MULT_LEVEL, refresher)]
        return [ctx.add_scalar(d, -1.0) for d in doubled]
    prod, a_new, b_new = _mult_batch(ctx, T[h], T[h + 1], evk, refresher)
    T[h], T[h + 1] = a_new, b_new
    doubled = [ctx.mult_by_scalar(t, 2.0, ctx.params.scale) for t in _ensure_level(ctx, prod, MIN_MULT_LEVEL, refresher)]
    lvl = min(d.level for d in doubled)
    t1 = _ensure_level(ctx, T[1], max(lvl, 2), refresher)
    out = []
    for d, t in zip(doubled, t1):
        t = _match(ctx, t, d)
        out.append(ctx.sub_ct(d, t))
    return out


def _match(ctx, src, ref):
    """Bring src to ref's (level, scale); burns one src level if scales differ."""
    if src.scale != ref.scale:
        src = ctx.adjust_scale(src, ref.scale)
        if src.scale != ref.scale:  # adjust declares the target exactly
            raise ApproxError("scale alignment failed")
    if src.level > ref.level:
        src = ctx.mod_drop(src, ref.level)
    elif src.level < ref.level:
        raise ApproxError("operand sank below its sibling's level")
    return src


def _eval_rec(ctx, coeffs, T, bs, evk, refresher, scale):
    """Recursive BSGS combine; every return lands exactly on `scale`."""
    deg = len(coeffs) - 1
    if deg < bs:
        return _eval_baby(ctx, coeffs, T, evk, refresher, scale)
    g = bs
    while g * 2 <= deg:
        g <<= 1
    q, r = _cheb_divide(coeffs, g)
    qv = _eval_rec(ctx, q, T, bs, evk, refresher, scale)
    prod, _, _ = _mult_batch(ctx, qv, T[g], evk, refresher)
    prod = _ensure_level(ctx, prod, MIN_MULT_LEVEL, refresher)
    prod = [ctx.adjust_scale(p, scale) for p in prod]
    rv = _eval_rec(ctx, r, T, bs, evk, refresher, scale)
    lvl = min(min(p.level for p in prod), min(v.level for v in rv))
    return [
        ctx.add_ct(ctx.mod_drop(p, lvl), ctx.mod_drop(v, lvl)) for p, v in zip(prod, rv)
    ]


def _eval_baby(ctx, coeffs, T, evk, refresher, scale):
    """Direct sum c_0 + sum_j c_j T_j for deg < bs, landing exactly on `scale`."""
    deg = len(coeffs) - 1
    used = [j for j in range(1, deg + 1) if abs(coeffs[j]) > 1e-14]
    if not used:
        base = _ensure_level(ctx, T[1], MIN_MULT_LEVEL, refresher)
        zero = [ctx.mult_by_scalar(t, 0.0, scale) for t in base]
        return [ctx.add_scalar(z, float(coeffs[0])) for z in zero]
    for j in used:
        T[j] = _ensure_level(ctx, T[j], MIN_MULT_LEVEL, refresher)
    lvl = min(min(t.level for t in T[j]) for j in used)
    acc = None
    for j in used:
        term = [
            ctx.mult_by_scalar(ctx.mod_drop(t, lvl), float(coeffs[j]), scale) for t in T[j]
        ]
        acc = term if acc is None else [ctx.add_ct(x, y) for x, y in zip(acc, term)]
    return [ctx.add_scalar(x, float(coeffs[0])) for x in acc]


def _cheb_divide(c, g):
    """Split p = q * T_g + r in the Chebyshev basis (requires deg(p) <= 2g-1)."""
    n = len(c) - 1
    q = np.zeros(n - g + 1)
    r = np.array(c[:g], dtype=np.float64)
    q[0] = c[g]
    for j in range(1, n - g + 1):
        q[j] = 2.0 * c[g + j]
        r[g - j] -= c[g + j]
    return q, r


# ----------------------------------------------------------------------
# Goldschmidt reciprocal
# ----------------------------------------------------------------------


def goldschmidt_inverse(ctx, ct, M: float, k: int, evk, refresher=None):
    """Approximate 1/s for slots s in (0, M].

    With x = s/M: b_0 = 1-x and r = prod_{i<k} (1 + b_0^(2^i)) = (1/x) *
    (1 - b_0^(2^k)); output r/M.  Relative error (1 - s_min/M)^(2^k).
    """
    if k < 1:
        raise ApproxError("k >= 1 required")
    cts = _ensure_level(ctx, [ct], MIN_MULT_LEVEL, refresher)
    x = [ctx.mult_by_scalar(t, 1.0 / M, ctx.params.scale) for t in cts]
    r = _goldschmidt_core(ctx, x, k, evk, refresher)
    r = _ensure_level(ctx, r, MIN_MULT_LEVEL, refresher)
    return ctx.mult_by_scalar(r[0], 1.0 / M, ctx.params.scale)


def goldschmidt_plain(s, M: float, k: int):
    """Float64 mirror of goldschmidt_inverse (the iteration oracle)."""
    x = np.asarray(s, dtype=np.float64) / M
    b = 1.0 - x
    r = 1.0 + b
    for _ in range(k - 1):
        b = b * b
        r = r * (1.0 + b)
    return r / M


def _goldschmidt_core(ctx, xs, k, evk, refresher):
    """r ~= 1/x for x in (0, 1], given tiles xs all at equal (level, scale)."""
    b = [ctx.add_scalar(ctx.negate(x), 1.0) for x in xs]  # 1 - x
    r = [ctx.add_scalar(t, 1.0) for t in b]  # 1 + b0
    for _ in range(k - 1):
        b2, b_in, _ = _mult_batch(ctx, b, b, evk, refresher)
        b = b2
        one_plus = [ctx.add_scalar(t, 1.0) for t in b]
        r, _, _ = _mult_batch(ctx, r, one_plus, evk, refresher)
    return r


# ----------------------------------------------------------------------
# softmax
# ----------------------------------------------------------------------


def approx_softmax(
    ctx: CkksContext,
    logits: PackedMatrix,
    cfg: SoftmaxConfig,
    evk,
    rks,
    refresher=None,
    exp_cheb: ChebyshevPoly = None,
) -> PackedMatrix:
    """Row-wise softmax over the first cfg.classes columns.

    Padding columns are zeroed (scaled mask applied after exp, before the
    row sum) because exp(0)=1 would pollute the denominators; padding rows
    come out near 1/classes and are ignored by unpack.
    """
    plan = logits.plan
    if cfg.classes != plan.cols:
        raise ApproxError(f"config classes {cfg.classes} != matrix cols {plan.cols}")
    cheb = exp_cheb or cfg.exp_cheb()
    E = _eval_poly_batch(ctx, list(logits.cts), cheb, evk, refresher)
    # mask padding columns and fold in 1/M: slots become exp(z)/M on real
    # columns, 0 elsewhere; the row sum is then s/M = x directly.
    row = np.zeros(plan.C)
    row[: cfg.classes] = 1.0 / cfg.denom_bound
    vec = np.zeros(plan.slot_count)
    vec[: plan.R * plan.C] = np.tile(row, plan.R)
    E = _ensure_level(ctx, E, MIN_MULT_LEVEL, refresher)
    Em = [ctx.mult_by_vector(e, vec) for e in E]
    Em_pm = PackedMatrix(plan, tuple(Em), Em[0].level, Em[0].scale)
    Em_pm = _refresh_pm(ctx, Em_pm, refresher) if Em_pm.level < MIN_MULT_LEVEL else Em_pm
    S = row_reduce_sum(ctx, Em_pm, rks)
    r = _goldschmidt_core(ctx, list(S.cts), cfg.goldschmidt_iters, evk, refresher)
    out, num, _ = _mult_batch(ctx, list(Em_pm.cts), r, evk, refresher)
    return PackedMatrix(plan, tuple(out), out[0].level, out[0].scale)


def approx_softmax_plain(Z: np.ndarray, cfg: SoftmaxConfig, exp_cheb: ChebyshevPoly = None) -> np.ndarray:
    """Float64 mirror of approx_softmax (same polynomial, same iterations)."""
    cheb = exp_cheb or cfg.exp_cheb()
    E = cheb(np.asarray(Z, dtype=np.float64)) / cfg.denom_bound
    x = E.sum(axis=-1, keepdims=True)
    b = 1.0 - x
    r = 1.0 + b
    for _ in range(cfg.goldschmidt_iters - 1):
        b = b * b
        r = r * (1.0 + b)
    return E * r


def exact_softmax(Z: np.ndarray) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    e = np.exp(Z - Z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _refresh_pm(ctx, pm: PackedMatrix, refresher) -> PackedMatrix:
    if refresher is None:
        raise LevelExhausted("packed matrix below the working level and no refresh channel")
    fresh = refresher(list(pm.cts))
    return PackedMatrix(pm.plan, tuple(fresh), fresh[0].level, fresh[0].scale)


# ----------------------------------------------------------------------
# documented depth budgets (level-consumption mirrors of the ops above)
# ----------------------------------------------------------------------


def poly_eval_depth(degree: int) -> int:
    """Multiplicative levels eval_poly_enc consumes when run refresh-free."""
    if degree == 0:
        return 2
    bs = 1 << max(1, (degree + 1).bit_length() // 2)
    lvl = {1: -1}  # affine map costs one level

    def prod_lvl(j):
        h = j // 2
        other = lvl[h] if j % 2 == 0 else lvl[h + 1]
        return min(lvl[h], other) - 2  # ct mult + doubling

    for j in range(2, bs):
        lvl[j] = prod_lvl(j)
    g = bs
    while g <= degree:
        lvl[g] = prod_lvl(g)
        g <<= 1

    def rec(dg):
        if dg < bs:
            return min(lvl[j] for j in range(1, max(dg, 1) + 1)) - 1
        g2 = bs
        while g2 * 2 <= dg:
            g2 <<= 1
        q = rec(dg - g2)
        prod = min(q, lvl[g2]) - 2  # mult + scale alignment
        return min(prod, rec(g2 - 1))

    return -rec(degree)


def softmax_depth(cfg: SoftmaxConfig) -> int:
    """Levels approx_softmax consumes refresh-free: exp + mask + row sum +
    Goldschmidt chain + the final numerator multiply.

    The Goldschmidt running product trails the squaring chain by one level
    (its i-th multiply consumes the freshly squared term), so the core costs
    k levels for k iterations.
    """
    return poly_eval_depth(cfg.exp_degree) + 2 + cfg.goldschmidt_iters + 1
