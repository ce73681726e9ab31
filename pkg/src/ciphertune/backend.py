"""Kernel backend selection.

The hot loops (NTT butterflies, pointwise modular products) exist twice:
a numba @njit build and a pure-numpy build with identical semantics.  The
environment variable CIPHERTUNE_BACKEND picks one:

    CIPHERTUNE_BACKEND=numba   force numba (ImportError if unavailable)
    CIPHERTUNE_BACKEND=numpy   force the numpy fallback
    unset / "auto"             numba when importable, else numpy

`ciphertune bench` times both builds side by side.
"""

import os

_CHOICE = os.environ.get("CIPHERTUNE_BACKEND", "auto").lower()

if _CHOICE not in ("auto", "numba", "numpy"):
    raise ValueError(f"CIPHERTUNE_BACKEND must be auto|numba|numpy, got {_CHOICE!r}")

if _CHOICE == "numpy":
    from . import kernels_numpy as kernels

    BACKEND = "numpy"
elif _CHOICE == "numba":
    from . import kernels_numba as kernels

    BACKEND = "numba"
else:
    try:
        from . import kernels_numba as kernels

        BACKEND = "numba"
    except ImportError:
        from . import kernels_numpy as kernels

        BACKEND = "numpy"


def get_kernels(name=None):
    """Return a kernel module by name ('numba'/'numpy'), default the active one."""
    if name is None:
        return kernels
    if name == "numpy":
        from . import kernels_numpy

        return kernels_numpy
    if name == "numba":
        from . import kernels_numba

        return kernels_numba
    raise ValueError(name)
