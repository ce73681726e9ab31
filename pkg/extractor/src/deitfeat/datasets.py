"""MedMNIST 2-D dataset loading and the official split/class tables.

Datasets ship as .npz archives with train/val/test image and label arrays;
this module only reads a local copy (pass --data-dir), it does not download.
"""

import os
from dataclasses import dataclass

import numpy as np


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetInfo:
    name: str
    classes: int
    channels: int
    splits: dict  # split -> official row count


# Official v2 splits; dermamnist/bloodmnist totals equal their source
# datasets' published image counts (10015 and 17092).
DATASETS = {
    "dermamnist": DatasetInfo("dermamnist", 7, 3, {"train": 7007, "val": 1003, "test": 2005}),
    "bloodmnist": DatasetInfo("bloodmnist", 8, 3, {"train": 11959, "val": 1712, "test": 3421}),
    "organamnist": DatasetInfo("organamnist", 11, 1, {"train": 34561, "val": 6491, "test": 17778}),
    "organcmnist": DatasetInfo("organcmnist", 11, 1, {"train": 12975, "val": 2392, "test": 8216}),
    "organsmnist": DatasetInfo("organsmnist", 11, 1, {"train": 13932, "val": 2452, "test": 8827}),
}

SPLITS = ("train", "val", "test")


def info(name: str) -> DatasetInfo:
    try:
        return DATASETS[name]
    except KeyError:
        raise DatasetError(f"unknown dataset {name!r}; choose from {sorted(DATASETS)}")


def load(name: str, data_dir: str):
    """Yield (split, images u8 [n,28,28(,3)], labels int64) from the local npz."""
    meta = info(name)
    path = os.path.join(data_dir, f"{name}.npz")
    if not os.path.exists(path):
        raise DatasetError(
            f"{path} not found; download the {name} archive into {data_dir} "
            "(no network download is attempted here)"
        )
    with np.load(path) as z:
        for split in SPLITS:
            ikey, lkey = f"{split}_images", f"{split}_labels"
            if ikey not in z or lkey not in z:
                raise DatasetError(f"{path} missing {ikey}/{lkey}")
            images = z[ikey]
            labels = z[lkey].reshape(-1).astype(np.int64)
            if images.shape[0] != labels.shape[0]:
                raise DatasetError(f"{split}: image/label count mismatch")
            if labels.size and labels.max() >= meta.classes:
                raise DatasetError(f"{split}: label out of range for {meta.classes} classes")
            yield split, images, labels
