"""Multinomial logistic-regression head trained on encrypted features.

The cloud-side loop runs Nesterov-accelerated gradient descent entirely on
packed ciphertexts; the momentum scalars are public.  A float64 oracle
trainer runs the identical schedule (optionally with the identical softmax
approximation) for lockstep comparison and validation-side monitoring.

Update rule per step (lam_0 = 0):
    W_new = V - eta * G(V)
    V_new = (1 - gamma_t) * W_new + gamma_t * W_old
    lam_{t+1} = (1 + sqrt(1 + 4 lam_t^2)) / 2,  gamma_t = (1 - lam_t) / lam_{t+1}

Ciphertext lifecycle: W, V and the softmax output are refreshed through the
key owner every step (the interactive substitute for bootstrapping), and
deep sub-circuits refresh intermediates through the same channel.  The bias
is a constant-1 feature column appended at ingestion, so feature_dim already
includes it.
"""

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .approx import SoftmaxConfig, approx_softmax, approx_softmax_plain, exact_softmax
from .ckks import CkksContext, CkksError
from .linalg import PackedMatrix, plan_packing


class TrainerError(CkksError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    epochs: int
    learning_rate: float
    batch_size: int
    feature_dim: int  # includes the bias column
    class_count: int
    softmax: SoftmaxConfig
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.learning_rate < 0:
            raise TrainerError("batch_size >= 1 and learning_rate >= 0 required")

    @property
    def stride(self) -> int:
        """Column stride shared by every packed operand of one training job."""
        need = max(self.feature_dim, self.class_count)
        return 1 << max(0, (need - 1).bit_length())

    def to_json(self) -> str:
        d = {
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "feature_dim": self.feature_dim,
            "class_count": self.class_count,
            "softmax": self.softmax.to_dict(),
            "seed": self.seed,
        }
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Hyperparams":
        d = json.loads(text)
        return cls(
            epochs=int(d["epochs"]),
            learning_rate=float(d["learning_rate"]),
            batch_size=int(d["batch_size"]),
            feature_dim=int(d["feature_dim"]),
            class_count=int(d["class_count"]),
            softmax=SoftmaxConfig.from_dict(d["softmax"]),
            seed=int(d["seed"]),
        )


@dataclass(frozen=True)
class ModelState:
    W: PackedMatrix
    V: PackedMatrix
    W_prev: PackedMatrix
    lam: float
    step: int


@dataclass
class TrainingRun:
    hyperparams: Hyperparams
    epoch_log: list = field(default_factory=list)
    state: ModelState = None


@dataclass(frozen=True)
class Batch:
    X: PackedMatrix  # rows x feature_dim
    Xt: PackedMatrix  # feature_dim x rows (column-major copy, packed at source)
    Y: PackedMatrix  # rows x classes, one-hot
    rows: int  # real (unpadded) row count


def nag_momentum_schedule(lam: float):
    """Advance the public momentum scalars; lam is strictly increasing."""
    if lam < 0:
        raise TrainerError("lambda must be nonnegative")
    lam_next = (1.0 + math.sqrt(1.0 + 4.0 * lam * lam)) / 2.0
    gamma = (1.0 - lam) / lam_next
    return lam_next, gamma


def init_model(ctx: CkksContext, hp: Hyperparams, pk, seed) -> ModelState:
    """Zero-initialized encrypted weights; deterministic under seed."""
    plan = plan_packing(hp.feature_dim, hp.class_count, ctx.slots, min_cols=hp.stride)
    zeros = np.zeros((hp.feature_dim, hp.class_count))
    seeds = np.random.SeedSequence(seed).spawn(3)
    W = linalg.pack(ctx, zeros, plan, pk, ctx.params.scale, seeds[0])
    V = linalg.pack(ctx, zeros, plan, pk, ctx.params.scale, seeds[1])
    Wp = linalg.pack(ctx, zeros, plan, pk, ctx.params.scale, seeds[2])
    return ModelState(W, V, Wp, lam=0.0, step=0)


def zero_model(ctx: CkksContext, hp: Hyperparams) -> ModelState:
    """Server-side zero initialization from trivial zero ciphertexts.

    Zero init is public by design, so a transparent all-zero ciphertext is
    a legitimate encryption of it; the first refresh re-randomizes W and V.
    """
    from .ckks import Ciphertext
    from .ring import zero_poly

    plan = plan_packing(hp.feature_dim, hp.class_count, ctx.slots, min_cols=hp.stride)
    z = zero_poly(ctx.basis, ctx.L, domain="ntt")
    ct = Ciphertext((z, z), ctx.L, ctx.params.scale, ctx.hash)
    pm = PackedMatrix(plan, tuple(ct for _ in range(plan.tile_count)), ctx.L, ctx.params.scale)
    return ModelState(W=pm, V=pm, W_prev=pm, lam=0.0, step=0)


def encrypted_grad(
    ctx: CkksContext,
    X: PackedMatrix,
    Xt: PackedMatrix,
    Y: PackedMatrix,
    V: PackedMatrix,
    rows: int,
    cfg: SoftmaxConfig,
    evk,
    rks,
    refresher,
    x_colreps=None,
) -> PackedMatrix:
    """(1/rows) * X^T (softmax(X V) - Y), all under encryption.

    The softmax output is refreshed before the second product: that resets
    its level AND pins its scale to the default so Y subtracts exactly.
    Requires zero padding of X (pad rows/cols) so padded batch rows cannot
    contribute to the gradient.
    """
    logits = linalg.matmul(ctx, X, V, evk, rks, a_colreps=x_colreps)
    S = approx_softmax(ctx, logits, cfg, evk, rks, refresher=refresher)
    S = linalg.refresh(ctx, S, refresher) if refresher else S
    if S.scale != Y.scale or S.level != Y.level:
        raise TrainerError("softmax output not aligned with labels (refresh required)")
    D = linalg.matrix_sub(ctx, S, Y)
    G = linalg.matmul_At_B(ctx, Xt, D, evk, rks)
    return linalg.scalar_mult(ctx, G, 1.0 / rows)


def nag_step(
    ctx: CkksContext,
    state: ModelState,
    batch: Batch,
    hp: Hyperparams,
    evk,
    rks,
    refresher,
    x_colreps=None,
) -> ModelState:
    """One accelerated step; W and V come back refreshed at full level."""
    G = encrypted_grad(
        ctx, batch.X, batch.Xt, batch.Y, state.V, batch.rows, hp.softmax, evk, rks, refresher, x_colreps
    )
    # eta and the block mask folded into one plain multiply, landing exactly
    # on the default scale; the mask also keeps padding columns of W at zero.
    plan = G.plan
    block = np.zeros((plan.R, plan.C))
    r0, r1, c0, c1 = plan.tile_bounds(0, 0)
    block[: r1 - r0, : c1 - c0] = hp.learning_rate
    vec = np.zeros(plan.slot_count)
    vec[: plan.R * plan.C] = block.ravel()
    eta_g_tiles = tuple(ctx.mult_by_vector(ct, vec, ctx.params.scale) for ct in G.cts)
    etaG = PackedMatrix(plan, eta_g_tiles, eta_g_tiles[0].level, eta_g_tiles[0].scale)
    V_low = linalg.mod_drop(ctx, state.V, etaG.level)
    W_new = linalg.matrix_sub(ctx, V_low, etaG)
    W_new = linalg.refresh(ctx, W_new, refresher)

    lam_next, gamma = nag_momentum_schedule(state.lam)
    a = linalg.scalar_mult(ctx, W_new, 1.0 - gamma)
    b = linalg.scalar_mult(ctx, state.W, gamma)
    V_new = linalg.matrix_add(ctx, a, b)
    V_new = linalg.refresh(ctx, V_new, refresher)
    return ModelState(W=W_new, V=V_new, W_prev=state.W, lam=lam_next, step=state.step + 1)


def train(
    ctx: CkksContext,
    state: ModelState,
    batches: list,
    hp: Hyperparams,
    evk,
    rks,
    refresher,
    epoch_callback=None,
    start_epoch: int = 0,
    colrep_cache: bool = True,
) -> TrainingRun:
    """epochs x batches NAG steps with per-step refresh of W and V.

    Column replications of the static X batches are cached across epochs
    (they depend only on the uploaded data).  ``epoch_callback(epoch, state)``
    fires after each epoch (protocol layer sends epoch reports from it).
    """
    run = TrainingRun(hyperparams=hp)
    run.state = state
    caches = [None] * len(batches)
    for epoch in range(start_epoch, hp.epochs):
        t0 = time.perf_counter()
        refreshes_before = getattr(refresher, "calls", 0)
        for bi, batch in enumerate(batches):
            if colrep_cache and caches[bi] is None:
                caches[bi] = linalg.precompute_colreps(ctx, batch.X, rks)
            state = nag_step(ctx, state, batch, hp, evk, rks, refresher, x_colreps=caches[bi])
            run.state = state
        run.epoch_log.append(
            {
                "epoch": epoch,
                "steps": len(batches),
                "refresh_calls": getattr(refresher, "calls", 0) - refreshes_before,
                "wall_seconds": time.perf_counter() - t0,
            }
        )
        if epoch_callback is not None:
            epoch_callback(epoch, state)
    return run


def encrypted_infer(ctx: CkksContext, W: PackedMatrix, X: PackedMatrix, evk, rks) -> PackedMatrix:
    """Encrypted logits X.W; no softmax (the key owner applies argmax)."""
    return linalg.matmul(ctx, X, W, evk, rks)


def pack_batches(ctx, X, y, hp: Hyperparams, pk, seed) -> list:
    """Split (X, y) into per-batch packed triples sharing the job stride.

    X must already carry the bias column (hp.feature_dim columns); rows
    are consumed in order (batch composition must match the oracle's).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    n, d = X.shape
    if d != hp.feature_dim:
        raise TrainerError(f"feature dim {d} != hyperparams {hp.feature_dim}")
    stride = hp.stride
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seeds = ss.spawn(max(1, -(-n // hp.batch_size)) * 3)
    batches = []
    si = 0
    for start in range(0, n, hp.batch_size):
        end = min(start + hp.batch_size, n)
        xb = X[start:end]
        yb = np.eye(hp.class_count)[y[start:end]]
        rows = end - start
        px = plan_packing(rows, d, ctx.slots, min_cols=stride)
        pxt = plan_packing(d, rows, ctx.slots, stride=stride)  # column-tiled over batch rows
        py = plan_packing(rows, hp.class_count, ctx.slots, min_cols=stride)
        batches.append(
            Batch(
                X=linalg.pack(ctx, xb, px, pk, ctx.params.scale, seeds[si]),
                Xt=linalg.pack(ctx, xb.T, pxt, pk, ctx.params.scale, seeds[si + 1]),
                Y=linalg.pack(ctx, yb, py, pk, ctx.params.scale, seeds[si + 2]),
                rows=rows,
            )
        )
        si += 3
    return batches


# ----------------------------------------------------------------------
# plaintext oracle trainer
# ----------------------------------------------------------------------


def plaintext_grad(W, X, Y, softmax_fn=exact_softmax):
    """(1/n) X^T (softmax(X W) - Y); the analytic gradient oracle."""
    S = softmax_fn(X @ W)
    return X.T @ (S - Y) / X.shape[0]


def cross_entropy(W, X, y):
    P = exact_softmax(X @ W)
    n = X.shape[0]
    return float(-np.log(np.clip(P[np.arange(n), y], 1e-300, None)).mean())


@dataclass
class OracleResult:
    W: np.ndarray
    per_step_W: list
    losses: list
    logit_range: tuple


def plaintext_train(X, y, hp: Hyperparams, use_approx_softmax=False, max_steps=None) -> OracleResult:
    """Same NAG schedule in float64; optionally the approximate softmax.

    Batch composition is positional (no shuffling) so the encrypted run and
    this oracle see identical data per step.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    n, d = X.shape
    c = hp.class_count
    Yh = np.eye(c)[y]
    if use_approx_softmax:
        cheb = hp.softmax.exp_cheb()
        softmax_fn = lambda Z: approx_softmax_plain(Z, hp.softmax, cheb)
    else:
        softmax_fn = exact_softmax
    W = np.zeros((d, c))
    V = W.copy()
    W_old = W.copy()
    lam = 0.0
    per_step = []
    losses = []
    lo = hi = 0.0
    steps = 0
    for _ in range(hp.epochs):
        for start in range(0, n, hp.batch_size):
            end = min(start + hp.batch_size, n)
            xb, yb = X[start:end], Yh[start:end]
            Z = xb @ V
            lo = min(lo, float(Z.min()))
            hi = max(hi, float(Z.max()))
            G = xb.T @ (softmax_fn(Z) - yb) / (end - start)
            W_new = V - hp.learning_rate * G
            lam_next, gamma = nag_momentum_schedule(lam)
            V = (1.0 - gamma) * W_new + gamma * W_old
            W_old = W_new
            W = W_new
            lam = lam_next
            per_step.append(W.copy())
            losses.append(cross_entropy(W, X, y))
            steps += 1
            if max_steps is not None and steps >= max_steps:
                return OracleResult(W, per_step, losses, (lo, hi))
    return OracleResult(W, per_step, losses, (lo, hi))


def accuracy(logits: np.ndarray, y: np.ndarray) -> float:
    """Argmax accuracy; ties break toward the lowest class index."""
    return float((np.argmax(logits, axis=1) == np.asarray(y)).mean())
