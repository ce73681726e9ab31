"""EFV1 feature-file format (the interface consumed by the training toolkit).

Layout, little-endian:
    magic "EFV1" | version u8 (1) | rows u32 | dim u32 | classes u16
    | label_width u8 (2) | dtype u8 (0 = float32)
    | rows*dim float32 row-major | rows uint16 labels
"""

import struct

import numpy as np

MAGIC = b"EFV1"
VERSION = 1
_HEADER = struct.Struct("<4sBIIHBB")


class EfvError(ValueError):
    pass


def write(path, features, labels, classes: int):
    features = np.asarray(features, dtype="<f4")
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise EfvError("features must be 2-D with one label per row")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise EfvError("label out of range")
    if not np.all(np.isfinite(features)):
        raise EfvError("non-finite feature")
    rows, dim = features.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, rows, dim, classes, 2, 0))
        f.write(features.tobytes())
        f.write(labels.astype("<u2").tobytes())


def read(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise EfvError("truncated header")
    magic, ver, rows, dim, classes, lwidth, dtype = _HEADER.unpack_from(blob)
    if magic != MAGIC or ver != VERSION or lwidth != 2 or dtype != 0:
        raise EfvError("bad magic/version/layout")
    expect = _HEADER.size + rows * dim * 4 + rows * 2
    if len(blob) != expect:
        raise EfvError(f"length {len(blob)} != expected {expect}")
    off = _HEADER.size
    feats = np.frombuffer(blob, dtype="<f4", count=rows * dim, offset=off).reshape(rows, dim)
    labels = np.frombuffer(blob, dtype="<u2", count=rows, offset=off + rows * dim * 4)
    if rows and labels.max() >= classes:
        raise EfvError("label exceeds class count")
    return feats.copy(), labels.astype(np.int64), classes
