"""Command-line entry points for both protocol roles.

Exit codes: 0 success, 1 usage, 2 I/O, 3 protocol, 4 crypto-parameter
mismatch.

Typical loopback run:

    ciphertune gen-blobs --classes 3 --dim 8 --rows 300 --seed 1 --out blobs.efv
    ciphertune keygen --profile toy --out keys/ --seed 7
    ciphertune encrypt-features --in blobs.efv --keys keys/ --out data/ --batch 64
    ciphertune serve --listen 127.0.0.1:7100 --profile toy --checkpoint-dir ck/ &
    ciphertune train --server 127.0.0.1:7100 --keys keys/ --data data/ \
        --epochs 4 --lr 0.1 --batch 64 --run-dir run/
    ciphertune infer --server 127.0.0.1:7100 --keys keys/ --data data/ \
        --run-dir run/ --out run/logits.npy
    ciphertune decrypt-logits --run-dir run/ --data data/
    ciphertune report --run-dir run/
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from . import formats, linalg, protocol, trainer
from .approx import SoftmaxConfig
from .backend import BACKEND
from .ckks import CkksContext, CkksError, CkksParams, ParamsMismatch

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_PROTOCOL = 3
EXIT_CRYPTO = 4

KEY_FILES = {"sk": "sk.ckx", "pk": "pk.ckx", "evk": "evk.ckx", "rot": "rot.ckx"}

# Per-dataset defaults: epochs, learning rate, batch size.
PRESETS = {
    "dermamnist": (12, 0.01, 512),
    "bloodmnist": (18, 0.1, 512),
    "organamnist": (6, 0.01, 512),
    "organcmnist": (17, 0.01, 512),
    "organsmnist": (15, 0.01, 512),
}


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _load_context(profile: str) -> CkksContext:
    return CkksContext(CkksParams.profile(profile))


def _load_keys(ctx: CkksContext, keydir: str):
    try:
        with open(os.path.join(keydir, KEY_FILES["sk"]), "rb") as f:
            sk = ctx.deserialize_secret_key(f.read())
        with open(os.path.join(keydir, KEY_FILES["pk"]), "rb") as f:
            pk = ctx.deserialize_public_key(f.read())
        with open(os.path.join(keydir, KEY_FILES["evk"]), "rb") as f:
            evk = ctx.deserialize_kswitch(f.read())
        with open(os.path.join(keydir, KEY_FILES["rot"]), "rb") as f:
            rks = ctx.deserialize_rotation_set(f.read())
    except FileNotFoundError as e:
        raise CliError(EXIT_IO, f"missing key file: {e.filename}")
    return sk, pk, evk, rks


def _key_profile(keydir: str) -> str:
    try:
        with open(os.path.join(keydir, "params.json")) as f:
            return json.load(f)["profile"]
    except FileNotFoundError:
        raise CliError(EXIT_IO, f"{keydir}/params.json not found (run keygen first)")


def cmd_keygen(args):
    ctx = _load_context(args.profile)
    os.makedirs(args.out, exist_ok=True)
    sk, pk, evk, rks = ctx.keygen(args.seed)
    blobs = {
        KEY_FILES["sk"]: ctx.serialize_secret_key(sk),
        KEY_FILES["pk"]: ctx.serialize_public_key(pk),
        KEY_FILES["evk"]: ctx.serialize_kswitch(evk),
        KEY_FILES["rot"]: ctx.serialize_rotation_set(rks),
    }
    for name, blob in blobs.items():
        with open(os.path.join(args.out, name), "wb") as f:
            f.write(blob)
    with open(os.path.join(args.out, "params.json"), "w") as f:
        json.dump(
            {
                "profile": args.profile,
                "ring_degree": ctx.n,
                "base_moduli": list(ctx.params.base_moduli),
                "special_moduli": list(ctx.params.special_moduli),
                "log2_scale": ctx.params.log2_scale,
                "ks_digit_primes": ctx.params.ks_digit_primes,
                "params_hash": ctx.hash.hex(),
                "seed": args.seed,
            },
            f,
            indent=2,
        )
    print(f"wrote {', '.join(blobs)} and params.json to {args.out}")
    return EXIT_OK


def cmd_gen_blobs(args):
    X, y = formats.make_blobs(args.classes, args.dim, args.rows, args.seed, args.separation)
    formats.write_efv(args.out, X.astype(np.float32), y, args.classes)
    print(f"wrote {args.rows} rows x {args.dim} features, {args.classes} classes -> {args.out}")
    return EXIT_OK


def cmd_encrypt_features(args):
    profile = _key_profile(args.keys)
    ctx = _load_context(profile)
    _, pk, _, _ = _load_keys(ctx, args.keys)
    try:
        X, y, classes = formats.read_efv(args.inp)
    except FileNotFoundError:
        raise CliError(EXIT_IO, f"feature file {args.inp} not found")
    if X.shape[0] == 0:
        raise CliError(EXIT_IO, "empty feature file; nothing to encrypt")
    spec = formats.SplitSpec()
    tr, va, te = formats.stratified_split(y, spec, args.seed)
    std = formats.Standardizer.fit(X[tr], row_norm_cap=args.row_norm_cap)
    Xtr = std.apply(X[tr])
    Xva = std.apply(X[va])
    d = Xtr.shape[1]
    hp = trainer.Hyperparams(
        epochs=1,
        learning_rate=0.1,
        batch_size=args.batch,
        feature_dim=d,
        class_count=classes,
        softmax=SoftmaxConfig.default(classes),
        seed=args.seed,
    )
    os.makedirs(args.out, exist_ok=True)
    batches = trainer.pack_batches(ctx, Xtr, y[tr], hp, pk, seed=args.seed)
    for i, b in enumerate(batches):
        for tag, pm in (("x", b.X), ("xt", b.Xt), ("y", b.Y)):
            with open(os.path.join(args.out, f"train_{i:03d}.{tag}.pmx"), "wb") as f:
                f.write(linalg.serialize_packed(ctx, pm))
    val_plan = linalg.plan_packing(Xva.shape[0], d, ctx.slots, min_cols=hp.stride)
    val_pm = linalg.pack(ctx, Xva, val_plan, pk, ctx.params.scale, args.seed + 1)
    with open(os.path.join(args.out, "val.x.pmx"), "wb") as f:
        f.write(linalg.serialize_packed(ctx, val_pm))
    with open(os.path.join(args.out, "stats.json"), "w") as f:
        f.write(std.to_json())
    with open(os.path.join(args.out, "split.json"), "w") as f:
        json.dump({"train": tr.tolist(), "val": va.tolist(), "test": te.tolist(), "seed": args.seed}, f)
    with open(os.path.join(args.out, "meta.json"), "w") as f:
        json.dump(
            {
                "classes": classes,
                "feature_dim": d,
                "batch": args.batch,
                "rows": {"train": len(tr), "val": len(va), "test": len(te)},
                "batch_rows": [b.rows for b in batches],
                "source": os.path.abspath(args.inp),
                "profile": profile,
            },
            f,
            indent=2,
        )
    print(
        f"packed {len(tr)} train rows into {len(batches)} batches, {len(va)} val rows; "
        f"test split ({len(te)} rows) stays plaintext with stats sidecar"
    )
    return EXIT_OK


def cmd_serve(args):
    host, port = _parse_addr(args.listen)
    ctx = _load_context(args.profile)
    if args.checkpoint_dir:
        os.makedirs(args.checkpoint_dir, exist_ok=True)
    server = protocol.ComputeServer(
        ctx, host=host, port=port, max_frame=args.max_frame, checkpoint_dir=args.checkpoint_dir
    )
    addr = server.start()
    print(f"serving profile {args.profile} on {addr[0]}:{addr[1]} (backend: {BACKEND})", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        server.stop()
    return EXIT_OK


def _parse_addr(text):
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise CliError(EXIT_USAGE, f"bad address {text!r}, expected HOST:PORT")
    return host, int(port)


def _load_meta(datadir):
    try:
        with open(os.path.join(datadir, "meta.json")) as f:
            return json.load(f)
    except FileNotFoundError:
        raise CliError(EXIT_IO, f"{datadir}/meta.json not found (run encrypt-features first)")


def _load_batches(ctx, datadir, meta):
    from .trainer import Batch

    batches = []
    for i, rows in enumerate(meta["batch_rows"]):
        parts = {}
        for tag in ("x", "xt", "y"):
            path = os.path.join(datadir, f"train_{i:03d}.{tag}.pmx")
            try:
                with open(path, "rb") as f:
                    parts[tag] = linalg.deserialize_packed(ctx, f.read())
            except FileNotFoundError:
                raise CliError(EXIT_IO, f"missing packed batch file {path}")
        batches.append(Batch(X=parts["x"], Xt=parts["xt"], Y=parts["y"], rows=rows))
    return batches


def _build_hp(args, meta):
    epochs, lr, batch = args.epochs, args.lr, meta["batch"]
    if args.preset:
        if args.preset not in PRESETS:
            raise CliError(EXIT_USAGE, f"unknown preset {args.preset!r}")
        epochs, lr, batch = PRESETS[args.preset]
    if args.epochs is not None:
        epochs = args.epochs
    if args.lr is not None:
        lr = args.lr
    if epochs is None or lr is None:
        raise CliError(EXIT_USAGE, "need --epochs and --lr (or --preset)")
    if batch != meta["batch"]:
        raise CliError(EXIT_USAGE, f"batch {batch} differs from packed batch {meta['batch']}; re-run encrypt-features")
    return trainer.Hyperparams(
        epochs=int(epochs),
        learning_rate=float(lr),
        batch_size=int(meta["batch"]),
        feature_dim=int(meta["feature_dim"]),
        class_count=int(meta["classes"]),
        softmax=SoftmaxConfig.default(int(meta["classes"])),
        seed=args.seed,
    )


def _oracle_metrics(datadir, meta, hp):
    with open(os.path.join(datadir, "split.json")) as f:
        split = json.load(f)
    std = formats.Standardizer.from_json(open(os.path.join(datadir, "stats.json")).read())
    X, y, _ = formats.read_efv(meta["source"])
    tr, te = np.array(split["train"]), np.array(split["test"])
    t0 = time.perf_counter()
    res = trainer.plaintext_train(std.apply(X[tr]), y[tr], hp)
    unenc_time = time.perf_counter() - t0
    Xte = std.apply(X[te])
    acc = trainer.accuracy(Xte @ res.W, y[te])
    return {
        "unenc_accuracy": acc,
        "unenc_seconds": unenc_time,
        "oracle_logit_range": list(res.logit_range),
    }, res


def cmd_train(args):
    meta = _load_meta(args.data)
    profile = _key_profile(args.keys)
    if meta.get("profile") not in (None, profile):
        raise CliError(EXIT_CRYPTO, f"data packed for profile {meta.get('profile')}, keys are {profile}")
    ctx = _load_context(profile)
    keys = _load_keys(ctx, args.keys)
    hp = _build_hp(args, meta)
    batches_data = _load_batches(ctx, args.data, meta)
    sess = protocol.OwnerSession(ctx, _parse_addr(args.server), seed=args.seed, profile=profile)
    run_dir = args.run_dir or "run"
    os.makedirs(run_dir, exist_ok=True)
    try:
        sess.hello()
        sess.keygen_and_provision(keys)
        sess.upload_train_batches(batches_data)
        val_path = os.path.join(args.data, "val.x.pmx")
        if os.path.exists(val_path):
            payload = bytearray(bytes([protocol.ROLE_VAL, 0]))
            with open(val_path, "rb") as f:
                val_blob = f.read()
            val_pm = linalg.deserialize_packed(ctx, val_blob)
            payload += (protocol.struct.pack("<I", 1) + protocol.struct.pack("<I", val_pm.plan.rows))
            payload += protocol._lp(val_blob)
            sess._rpc(protocol.MSG_UPLOAD, bytes(payload), protocol.MSG_UPLOAD)
        t0 = time.perf_counter()
        reports = sess.train(hp)
        enc_seconds = time.perf_counter() - t0
    finally:
        sess.close()
    oracle, _ = _oracle_metrics(args.data, meta, hp)
    report = {
        "dataset": args.preset or os.path.basename(meta["source"]),
        "epochs": hp.epochs,
        "learning_rate": hp.learning_rate,
        "batch_size": hp.batch_size,
        "enc_seconds": enc_seconds,
        "refresh_roundtrips": sess.refresh_responses,
        "epoch_reports": [r["metrics"] for r in reports],
        **oracle,
        "hyperparams": json.loads(hp.to_json()),
        "backend": BACKEND,
    }
    with open(os.path.join(run_dir, "report.json"), "w") as f:
        json.dump(report, f, indent=2)
    print(f"trained {hp.epochs} epochs in {enc_seconds:.1f}s; report -> {run_dir}/report.json")
    return EXIT_OK


def cmd_infer(args):
    meta = _load_meta(args.data)
    profile = _key_profile(args.keys)
    ctx = _load_context(profile)
    keys = _load_keys(ctx, args.keys)
    with open(os.path.join(args.run_dir, "report.json")) as f:
        report = json.load(f)
    hp = trainer.Hyperparams.from_json(json.dumps(report["hyperparams"]))
    with open(os.path.join(args.data, "split.json")) as f:
        split = json.load(f)
    std = formats.Standardizer.from_json(open(os.path.join(args.data, "stats.json")).read())
    X, y, _ = formats.read_efv(meta["source"])
    te = np.array(split["test"])
    Xte = std.apply(X[te])
    sess = protocol.OwnerSession(ctx, _parse_addr(args.server), seed=args.seed, profile=profile)
    try:
        sess.hello()
        sess.keygen_and_provision(keys)
        logits = sess.infer(Xte, hp, from_checkpoint=True)
    finally:
        sess.close()
    out = args.out or os.path.join(args.run_dir, "logits.npy")
    np.save(out, logits)
    np.save(os.path.join(args.run_dir, "test_labels.npy"), y[te])
    print(f"encrypted inference over {len(te)} rows -> {out}")
    return EXIT_OK


def cmd_decrypt_logits(args):
    logits_path = args.logits or os.path.join(args.run_dir, "logits.npy")
    labels_path = os.path.join(args.run_dir, "test_labels.npy")
    try:
        logits = np.load(logits_path)
        y = np.load(labels_path)
    except FileNotFoundError as e:
        raise CliError(EXIT_IO, f"missing {e.filename}")
    preds = np.argmax(logits, axis=1)  # ties resolve to the lowest index
    acc = float((preds == y).mean())
    out = {"rows": int(len(y)), "enc_accuracy": acc}
    with open(os.path.join(args.run_dir, "report.json")) as f:
        report = json.load(f)
    report.update(out)
    with open(os.path.join(args.run_dir, "report.json"), "w") as f:
        json.dump(report, f, indent=2)
    print(f"accuracy over {len(y)} encrypted test rows: {acc:.4f}")
    return EXIT_OK


def cmd_report(args):
    try:
        with open(os.path.join(args.run_dir, "report.json")) as f:
            r = json.load(f)
    except FileNotFoundError:
        raise CliError(EXIT_IO, f"{args.run_dir}/report.json not found")
    cols = [
        ("Dataset", r.get("dataset", "?")),
        ("Enc training time", f"{r.get('enc_seconds', float('nan')) / 60:.2f} mins"),
        ("Enc accuracy", _pct(r.get("enc_accuracy"))),
        ("Unenc accuracy", _pct(r.get("unenc_accuracy"))),
        ("Unenc time", f"{r.get('unenc_seconds', float('nan')):.2f} s"),
        ("#Epochs", str(r.get("epochs", "?"))),
    ]
    width = max(len(k) for k, _ in cols)
    lines = [f"{k:<{width}}  {v}" for k, v in cols]
    text = "\n".join(lines)
    print(text)
    with open(os.path.join(args.run_dir, "report.txt"), "w") as f:
        f.write(text + "\n")
    return EXIT_OK


def _pct(x):
    return f"{100 * x:.2f}%" if isinstance(x, (int, float)) else "-"


def cmd_bench(args):
    from .bench import run_bench

    run_bench(n=args.n, levels=args.levels, repeats=args.repeats)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="ciphertune", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    k = sub.add_parser("keygen", help="generate and store a key set")
    k.add_argument("--profile", choices=["test", "secure128", "toy"], required=True)
    k.add_argument("--out", required=True)
    k.add_argument("--seed", type=int, default=0)
    k.set_defaults(fn=cmd_keygen)

    g = sub.add_parser("gen-blobs", help="write a synthetic Gaussian-mixture EFV1 file")
    g.add_argument("--classes", type=int, required=True)
    g.add_argument("--dim", type=int, required=True)
    g.add_argument("--rows", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--separation", type=float, default=6.0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_blobs)

    e = sub.add_parser("encrypt-features", help="split, standardize, pack and encrypt features")
    e.add_argument("--in", dest="inp", required=True)
    e.add_argument("--keys", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--batch", type=int, default=512)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--row-norm-cap", type=float, default=4.0)
    e.set_defaults(fn=cmd_encrypt_features)

    s = sub.add_parser("serve", help="run the compute server")
    s.add_argument("--listen", required=True)
    s.add_argument("--profile", choices=["test", "secure128", "toy"], required=True)
    s.add_argument("--checkpoint-dir")
    s.add_argument("--max-frame", type=int, default=protocol.DEFAULT_MAX_FRAME)
    s.set_defaults(fn=cmd_serve)

    t = sub.add_parser("train", help="drive a training session against a server")
    t.add_argument("--server", required=True)
    t.add_argument("--keys", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int, help="must match the packed batch size")
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--run-dir", default="run")
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="encrypted inference on the test split")
    i.add_argument("--server", required=True)
    i.add_argument("--keys", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--run-dir", default="run")
    i.add_argument("--out")
    i.add_argument("--seed", type=int, default=0)
    i.set_defaults(fn=cmd_infer)

    d = sub.add_parser("decrypt-logits", help="argmax + accuracy from decrypted logits")
    d.add_argument("--run-dir", default="run")
    d.add_argument("--logits")
    d.set_defaults(fn=cmd_decrypt_logits)

    r = sub.add_parser("report", help="print the run report table")
    r.add_argument("--run-dir", default="run")
    r.set_defaults(fn=cmd_report)

    b = sub.add_parser("bench", help="compare numba and numpy kernel backends")
    b.add_argument("--n", type=int, default=8192)
    b.add_argument("--levels", type=int, default=8)
    b.add_argument("--repeats", type=int, default=20)
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (FileNotFoundError, PermissionError, IsADirectoryError, formats.FormatError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConnectionError, protocol.ProtocolError, protocol.RemoteError, EOFError, TimeoutError) as e:
        print(f"protocol error: {e}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (ParamsMismatch,) as e:
        print(f"crypto parameter mismatch: {e}", file=sys.stderr)
        return EXIT_CRYPTO
    except CkksError as e:
        print(f"crypto error: {e}", file=sys.stderr)
        return EXIT_CRYPTO


if __name__ == "__main__":
    sys.exit(main())
