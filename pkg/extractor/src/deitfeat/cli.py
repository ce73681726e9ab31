"""deitfeat CLI: extract features from a local MedMNIST archive, verify files."""

import argparse
import sys

from . import datasets
from .embedder import POOLINGS, StubEmbedder
from .extract import ExtractionConfig, extract, verify


def main(argv=None):
    p = argparse.ArgumentParser(prog="deitfeat")
    sub = p.add_subparsers(dest="cmd", required=True)

    e = sub.add_parser("extract", help="embed a dataset and write EFV1 files per split")
    e.add_argument("--dataset", choices=sorted(datasets.DATASETS), required=True)
    e.add_argument("--data-dir", required=True, help="directory holding <dataset>.npz")
    e.add_argument("--out", required=True)
    e.add_argument("--model", default=None, help="model id or local path (default: pretrained DEiT)")
    e.add_argument("--pooling", choices=POOLINGS, default="mean_of_both")
    e.add_argument("--batch-size", type=int, default=64)
    e.add_argument("--stub-dim", type=int, default=None,
                   help="use the deterministic stub embedder with this feature dim (testing)")

    v = sub.add_parser("verify", help="validate an EFV1 file against the official tables")
    v.add_argument("path")
    v.add_argument("--dataset", choices=sorted(datasets.DATASETS), required=True)
    v.add_argument("--split", choices=datasets.SPLITS, required=True)

    args = p.parse_args(argv)
    try:
        if args.cmd == "extract":
            kw = {"model_id": args.model} if args.model else {}
            cfg = ExtractionConfig(
                dataset=args.dataset, data_dir=args.data_dir, out_dir=args.out,
                pooling=args.pooling, batch_size=args.batch_size, **kw,
            )
            embedder = StubEmbedder(dim=args.stub_dim) if args.stub_dim else None
            paths = extract(cfg, embedder=embedder)
            for split, path in paths.items():
                print(f"{split}: {path}")
            return 0
        report = verify(args.path, args.dataset, args.split)
        for k, val in report.items():
            print(f"{k}: {val}")
        return 0 if report["ok"] else 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
