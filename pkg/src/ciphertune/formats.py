"""Feature-file format (EFV1), dataset splitting, and preprocessing.

EFV1 layout (little-endian):
    magic   4s   "EFV1"
    version u8   1
    rows    u32
    dim     u32
    classes u16
    lwidth  u8   label width in bytes (2)
    dtype   u8   0 = float32
    features rows*dim float32, row-major
    labels   rows  uint16

The byte length is exactly header + rows*dim*4 + rows*2; any deviation,
unknown field value, or out-of-range label is a parse error, never a crash
or silent misread.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

EFV_MAGIC = b"EFV1"
EFV_VERSION = 1
_HEADER = struct.Struct("<4sBIIHBB")


class FormatError(ValueError):
    pass


def write_efv(path, features: np.ndarray, labels: np.ndarray, classes: int):
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise FormatError("features must be 2-D with one label per row")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise FormatError("labels out of range for class count")
    if not np.all(np.isfinite(features)):
        raise FormatError("features must be finite")
    rows, dim = features.shape
    blob = _HEADER.pack(EFV_MAGIC, EFV_VERSION, rows, dim, classes, 2, 0)
    blob += features.astype("<f4").tobytes()
    blob += labels.astype("<u2").tobytes()
    with open(path, "wb") as f:
        f.write(blob)


def read_efv(path):
    with open(path, "rb") as f:
        blob = f.read()
    return parse_efv(blob)


def parse_efv(blob: bytes):
    if len(blob) < _HEADER.size:
        raise FormatError("truncated header")
    magic, ver, rows, dim, classes, lwidth, dtype = _HEADER.unpack_from(blob)
    if magic != EFV_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if ver != EFV_VERSION:
        raise FormatError(f"unsupported version {ver}")
    if lwidth != 2 or dtype != 0:
        raise FormatError("unsupported label width or dtype")
    if classes < 1 or dim < 1:
        raise FormatError("empty class count or feature dim")
    expect = _HEADER.size + rows * dim * 4 + rows * 2
    if len(blob) != expect:
        raise FormatError(f"length {len(blob)} != expected {expect}")
    off = _HEADER.size
    feats = np.frombuffer(blob, dtype="<f4", count=rows * dim, offset=off).reshape(rows, dim)
    labels = np.frombuffer(blob, dtype="<u2", count=rows, offset=off + rows * dim * 4)
    if rows and labels.max() >= classes:
        raise FormatError("label exceeds class count")
    if not np.all(np.isfinite(feats)):
        raise FormatError("non-finite feature value")
    return feats.astype(np.float64), labels.astype(np.int64), classes


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.7
    val: float = 0.1
    test: float = 0.2

    def __post_init__(self):
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise FormatError("split fractions must sum to 1")
        if min(self.train, self.val, self.test) < 0:
            raise FormatError("split fractions must be nonnegative")


def stratified_split(labels: np.ndarray, spec: SplitSpec, seed: int):
    """Deterministic per-class split; each class lands within one row of spec."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    tr, va, te = [], [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        n = len(idx)
        n_tr = int(np.floor(spec.train * n))
        n_va = int(np.floor(spec.val * n))
        tr.extend(idx[:n_tr])
        va.extend(idx[n_tr : n_tr + n_va])
        te.extend(idx[n_tr + n_va :])
    return np.sort(np.array(tr, dtype=np.int64)), np.sort(np.array(va, dtype=np.int64)), np.sort(
        np.array(te, dtype=np.int64)
    )


@dataclass(frozen=True)
class Standardizer:
    """Per-feature standardization plus a row-norm cap.

    Fitted on the training split only (the stats never leave the data
    owner); the cap keeps logits inside the softmax domain bound.
    """

    mean: tuple
    std: tuple
    row_norm_cap: float = 4.0

    @classmethod
    def fit(cls, X: np.ndarray, row_norm_cap: float = 4.0) -> "Standardizer":
        X = np.asarray(X, dtype=np.float64)
        std = X.std(axis=0)
        std = np.where(std < 1e-9, 1.0, std)
        return cls(tuple(map(float, X.mean(axis=0))), tuple(map(float, std)), row_norm_cap)

    def apply(self, X: np.ndarray, add_bias: bool = True) -> np.ndarray:
        X = (np.asarray(X, dtype=np.float64) - np.array(self.mean)) / np.array(self.std)
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        X = X / np.maximum(1.0, norms / self.row_norm_cap)
        if add_bias:
            X = np.hstack([X, np.ones((X.shape[0], 1))])
        return X

    def to_json(self) -> str:
        return json.dumps(
            {"mean": list(self.mean), "std": list(self.std), "row_norm_cap": self.row_norm_cap},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "Standardizer":
        d = json.loads(text)
        return cls(tuple(d["mean"]), tuple(d["std"]), float(d["row_norm_cap"]))


def make_blobs(classes: int, dim: int, rows: int, seed: int, separation: float = 6.0):
    """Gaussian mixture with unit noise and the given minimum centroid gap.

    Label histogram is balanced to within one row; row order is shuffled
    deterministically.
    """
    if classes < 2 or dim < 1 or rows < classes:
        raise FormatError("need >= 2 classes, >= 1 dim, rows >= classes")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 1.0, (classes, dim))
    dists = [
        np.linalg.norm(centers[i] - centers[j])
        for i in range(classes)
        for j in range(i + 1, classes)
    ]
    centers *= separation / max(min(dists), 1e-9)
    y = (np.arange(rows) % classes).astype(np.int64)
    rng.shuffle(y)
    X = centers[y] + rng.normal(0.0, 1.0, (rows, dim))
    return X.astype(np.float64), y
