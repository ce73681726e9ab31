"""Backend selection via the environment flag."""

import os
import subprocess
import sys


def backend_of(env_value):
    env = dict(os.environ)
    if env_value is None:
        env.pop("CIPHERTUNE_BACKEND", None)
    else:
        env["CIPHERTUNE_BACKEND"] = env_value
    out = subprocess.run(
        [sys.executable, "-c", "from ciphertune.backend import BACKEND; print(BACKEND)"],
        capture_output=True,
        text=True,
        env=env,
        timeout=120,
    )
    assert out.returncode == 0, out.stderr
    return out.stdout.strip()


def test_forced_numpy():
    assert backend_of("numpy") == "numpy"


def test_forced_numba():
    assert backend_of("numba") == "numba"


def test_auto_prefers_numba_here():
    assert backend_of(None) == "numba"


def test_bad_value_rejected():
    env = dict(os.environ, CIPHERTUNE_BACKEND="cuda")
    out = subprocess.run(
        [sys.executable, "-c", "import ciphertune.backend"],
        capture_output=True,
        text=True,
        env=env,
        timeout=120,
    )
    assert out.returncode != 0
