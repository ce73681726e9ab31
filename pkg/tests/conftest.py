import numpy as np
import pytest

from ciphertune import ckks
from ciphertune.ring import find_ntt_primes


def make_toy_params(n=256, levels=6, specials=2):
    """Small insecure parameters for fast unit tests (not a named profile)."""
    base = find_ntt_primes(40, 2 * n, levels)
    spec = find_ntt_primes(59, 2 * n, specials, skip=base)
    return ckks.CkksParams(n, tuple(base), tuple(spec), 40, "toy")


@pytest.fixture(scope="session")
def toy_ctx():
    return ckks.CkksContext(make_toy_params())


@pytest.fixture(scope="session")
def toy_keys(toy_ctx):
    return toy_ctx.keygen(1234)


@pytest.fixture(scope="session")
def test_profile_ctx():
    """The named 'test' profile (N=2^13); expensive to build, shared."""
    return ckks.CkksContext(ckks.CkksParams.profile("test"))


@pytest.fixture(scope="session")
def test_profile_keys(test_profile_ctx):
    return test_profile_ctx.keygen(99)


def rand_slots(ctx, rng, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, ctx.slots)
