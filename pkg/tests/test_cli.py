"""CLI integration: full loopback pipeline via subprocesses, exit codes."""

import json
import os
import re
import socket
import subprocess
import sys
import time

import numpy as np
import pytest

from ciphertune import formats

CLI = [sys.executable, "-m", "ciphertune.cli"]


def run_cli(*args, check=True, **kw):
    proc = subprocess.run([*CLI, *args], capture_output=True, text=True, timeout=560, **kw)
    if check and proc.returncode != 0:
        raise AssertionError(f"cli {' '.join(args)} -> {proc.returncode}\n{proc.stdout}\n{proc.stderr}")
    return proc


def free_port():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def keydir(workdir):
    out = workdir / "keys"
    run_cli("keygen", "--profile", "toy", "--out", str(out), "--seed", "7")
    return out


class TestKeygen:
    def test_emits_documented_files(self, keydir):
        for name in ("sk.ckx", "pk.ckx", "evk.ckx", "rot.ckx", "params.json"):
            assert (keydir / name).exists()

    def test_deterministic_under_seed(self, workdir, keydir):
        out2 = workdir / "keys2"
        run_cli("keygen", "--profile", "toy", "--out", str(out2), "--seed", "7")
        for name in ("sk.ckx", "pk.ckx", "evk.ckx", "rot.ckx"):
            assert (keydir / name).read_bytes() == (out2 / name).read_bytes()

    def test_key_sizes_match_parameter_formula(self, keydir):
        params = json.loads((keydir / "params.json").read_text())
        n = params["ring_degree"]
        L = len(params["base_moduli"])
        K = len(params["special_moduli"])
        alpha = params["ks_digit_primes"]
        # CKX1 header is 20 bytes; each poly row is N u64 words
        assert len((keydir / "sk.ckx").read_bytes()) == 20 + (L + K) * n * 8
        assert len((keydir / "pk.ckx").read_bytes()) == 20 + 2 * L * n * 8
        dnum = -(-L // alpha)
        assert len((keydir / "evk.ckx").read_bytes()) == 20 + 2 * dnum * (L + K) * n * 8


class TestGenBlobs:
    def test_creates_parseable_efv(self, workdir):
        out = workdir / "blobs.efv"
        run_cli("gen-blobs", "--classes", "3", "--dim", "6", "--rows", "90", "--seed", "1", "--out", str(out))
        X, y, classes = formats.read_efv(out)
        assert X.shape == (90, 6) and classes == 3
        counts = np.bincount(y)
        assert counts.max() - counts.min() <= 1

    def test_deterministic(self, workdir):
        a = workdir / "a.efv"
        b = workdir / "b.efv"
        for out in (a, b):
            run_cli("gen-blobs", "--classes", "2", "--dim", "3", "--rows", "20", "--seed", "9", "--out", str(out))
        assert a.read_bytes() == b.read_bytes()


@pytest.fixture(scope="module")
def datadir(workdir, keydir):
    efv = workdir / "train.efv"
    run_cli("gen-blobs", "--classes", "3", "--dim", "5", "--rows", "60", "--seed", "3", "--out", str(efv))
    out = workdir / "data"
    run_cli("encrypt-features", "--in", str(efv), "--keys", str(keydir), "--out", str(out), "--batch", "16")
    return out


@pytest.fixture(scope="module")
def server(workdir):
    port = free_port()
    ckdir = workdir / "ck"
    proc = subprocess.Popen(
        [*CLI, "serve", "--listen", f"127.0.0.1:{port}", "--profile", "toy", "--checkpoint-dir", str(ckdir)],
        stdout=subprocess.PIPE,
        stderr=subprocess.STDOUT,
        text=True,
    )
    line = proc.stdout.readline()
    assert "serving" in line, line
    yield f"127.0.0.1:{port}"
    proc.terminate()
    proc.wait(timeout=10)


class TestPipeline:
    def test_encrypt_features_outputs(self, datadir):
        meta = json.loads((datadir / "meta.json").read_text())
        assert meta["classes"] == 3 and meta["feature_dim"] == 6  # bias appended
        assert (datadir / "stats.json").exists() and (datadir / "val.x.pmx").exists()
        assert sum(meta["rows"].values()) == 60

    def test_stats_sidecar_reproduces_standardization(self, datadir, workdir):
        std = formats.Standardizer.from_json((datadir / "stats.json").read_text())
        split = json.loads((datadir / "split.json").read_text())
        X, y, _ = formats.read_efv(workdir / "train.efv")
        te = np.array(split["test"])
        z1 = std.apply(X[te])
        z2 = formats.Standardizer.from_json(std.to_json()).apply(X[te])
        assert np.array_equal(z1, z2) and z1.shape[1] == 6

    def test_empty_input_rejected(self, workdir, keydir, tmp_path):
        empty = tmp_path / "empty.efv"
        formats.write_efv(empty, np.zeros((0, 3), np.float32), np.zeros(0, np.int64), 2)
        proc = run_cli(
            "encrypt-features", "--in", str(empty), "--keys", str(keydir), "--out", str(tmp_path / "out"),
            check=False,
        )
        assert proc.returncode == 2
        assert not (tmp_path / "out" / "meta.json").exists()

    def test_train_infer_report_loop(self, workdir, keydir, datadir, server):
        rundir = workdir / "run"
        run_cli(
            "train", "--server", server, "--keys", str(keydir), "--data", str(datadir),
            "--epochs", "2", "--lr", "0.1", "--run-dir", str(rundir),
        )
        report = json.loads((rundir / "report.json").read_text())
        assert report["epochs"] == 2 and report["unenc_accuracy"] > 0.5
        run_cli(
            "infer", "--server", server, "--keys", str(keydir), "--data", str(datadir),
            "--run-dir", str(rundir),
        )
        proc = run_cli("decrypt-logits", "--run-dir", str(rundir))
        assert "accuracy" in proc.stdout
        report = json.loads((rundir / "report.json").read_text())
        assert "enc_accuracy" in report
        # encrypted and plaintext-oracle accuracies agree on these blobs
        assert abs(report["enc_accuracy"] - report["unenc_accuracy"]) <= 0.1
        proc = run_cli("report", "--run-dir", str(rundir))
        for col in ("Enc training time", "Enc accuracy", "Unenc accuracy", "Unenc time", "#Epochs"):
            assert col in proc.stdout
        assert (rundir / "report.txt").exists()

    def test_preset_expansion(self):
        from ciphertune.cli import PRESETS

        assert PRESETS["dermamnist"] == (12, 0.01, 512)
        assert PRESETS["bloodmnist"] == (18, 0.1, 512)
        assert PRESETS["organamnist"] == (6, 0.01, 512)
        assert PRESETS["organcmnist"] == (17, 0.01, 512)
        assert PRESETS["organsmnist"] == (15, 0.01, 512)


class TestExitCodes:
    def test_usage_error_is_1(self):
        proc = run_cli("keygen", "--profile", "bogus", "--out", "x", check=False)
        assert proc.returncode == 1
        proc = run_cli("definitely-not-a-command", check=False)
        assert proc.returncode == 1

    def test_io_error_is_2(self, tmp_path):
        proc = run_cli(
            "encrypt-features", "--in", str(tmp_path / "nope.efv"), "--keys", str(tmp_path),
            "--out", str(tmp_path / "o"), check=False,
        )
        assert proc.returncode == 2

    def test_connection_refused_is_3(self, keydir, workdir, tmp_path):
        port = free_port()  # nothing listening
        efv = tmp_path / "t.efv"
        run_cli("gen-blobs", "--classes", "2", "--dim", "3", "--rows", "20", "--seed", "4", "--out", str(efv))
        data = tmp_path / "d"
        run_cli("encrypt-features", "--in", str(efv), "--keys", str(keydir), "--out", str(data), "--batch", "8")
        proc = run_cli(
            "train", "--server", f"127.0.0.1:{port}", "--keys", str(keydir), "--data", str(data),
            "--epochs", "1", "--lr", "0.1", check=False, cwd=str(tmp_path),
        )
        assert proc.returncode == 3

    def test_profile_mismatch_is_4(self, workdir, keydir, tmp_path):
        # keys for 'toy' but data packed under a different profile tag
        data = tmp_path / "d2"
        efv = tmp_path / "t2.efv"
        run_cli("gen-blobs", "--classes", "2", "--dim", "3", "--rows", "20", "--seed", "4", "--out", str(efv))
        run_cli("encrypt-features", "--in", str(efv), "--keys", str(keydir), "--out", str(data), "--batch", "8")
        meta = json.loads((data / "meta.json").read_text())
        meta["profile"] = "secure128"
        (data / "meta.json").write_text(json.dumps(meta))
        proc = run_cli(
            "train", "--server", "127.0.0.1:1", "--keys", str(keydir), "--data", str(data),
            "--epochs", "1", "--lr", "0.1", check=False, cwd=str(tmp_path),
        )
        assert proc.returncode == 4
