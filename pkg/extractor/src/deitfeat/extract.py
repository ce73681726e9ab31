"""Extraction pipeline: dataset -> frozen-transformer features -> EFV1 files."""

import hashlib
import os
from dataclasses import dataclass

import numpy as np

from . import datasets, efv
from .embedder import DEFAULT_MODEL_ID, POOLINGS, TransformerEmbedder


@dataclass(frozen=True)
class ExtractionConfig:
    dataset: str
    data_dir: str
    out_dir: str
    model_id: str = DEFAULT_MODEL_ID
    pooling: str = "mean_of_both"
    batch_size: int = 64
    device: str = "cpu"

    def __post_init__(self):
        datasets.info(self.dataset)
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}")


def extract(cfg: ExtractionConfig, embedder=None) -> dict:
    """Embed every official split and write one EFV1 per split plus a manifest.

    Deterministic: inference mode, no augmentation; rerunning produces
    byte-identical files.  Returns {split: path}.
    """
    meta = datasets.info(cfg.dataset)
    if embedder is None:
        embedder = TransformerEmbedder(cfg.model_id, device=cfg.device)
    os.makedirs(cfg.out_dir, exist_ok=True)
    paths = {}
    counts = {}
    for split, images, labels in datasets.load(cfg.dataset, cfg.data_dir):
        feats = embedder.embed(images, cfg.pooling, cfg.batch_size)
        if not np.all(np.isfinite(feats)):
            raise RuntimeError(f"{split}: non-finite feature values")
        path = os.path.join(cfg.out_dir, f"{cfg.dataset}_{split}.efv")
        efv.write(path, feats, labels, meta.classes)
        paths[split] = path
        counts[split] = images.shape[0]
    manifest = os.path.join(cfg.out_dir, f"{cfg.dataset}_manifest.txt")
    with open(manifest, "w") as f:
        f.write(f"dataset={cfg.dataset}\n")
        f.write(f"model={getattr(embedder, 'model_id', cfg.model_id)}\n")
        f.write(f"pooling={cfg.pooling}\n")
        f.write(f"feature_dim={embedder.dim}\n")
        f.write("resize=28x28->224x224 bilinear, grayscale replicated to 3 channels\n")
        for split in datasets.SPLITS:
            f.write(f"rows_{split}={counts[split]}\n")
            f.write(f"sha256_{split}={_sha256(paths[split])}\n")
    paths["manifest"] = manifest
    return paths


def verify(path: str, dataset: str, split: str) -> dict:
    """Validate header arithmetic, label range, and official split row count."""
    meta = datasets.info(dataset)
    if split not in datasets.SPLITS:
        raise ValueError(f"split must be one of {datasets.SPLITS}")
    feats, labels, classes = efv.read(path)
    problems = []
    if classes != meta.classes:
        problems.append(f"class count {classes} != official {meta.classes}")
    expected_rows = meta.splits[split]
    if feats.shape[0] != expected_rows:
        problems.append(f"row count {feats.shape[0]} != official {expected_rows}")
    if labels.size and labels.max() >= classes:
        problems.append("label out of range")
    if not np.all(np.isfinite(feats)):
        problems.append("non-finite features")
    return {
        "path": path,
        "rows": int(feats.shape[0]),
        "dim": int(feats.shape[1]),
        "classes": int(classes),
        "label_histogram": np.bincount(labels, minlength=classes).tolist(),
        "problems": problems,
        "ok": not problems,
    }


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
