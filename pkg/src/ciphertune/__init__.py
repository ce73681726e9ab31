"""ciphertune: encrypted fine-tuning of a linear classifier head under CKKS."""

from .backend import BACKEND
from .ckks import CkksContext, CkksParams, LoopbackRefresher

__all__ = ["BACKEND", "CkksContext", "CkksParams", "LoopbackRefresher"]

__version__ = "0.1.0"
