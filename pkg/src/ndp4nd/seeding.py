"""Deterministic RNG-stream derivation.

Every random draw in the package is keyed by a tuple such as
(master_seed, "train", epoch, task_id), so parallel and serial schedules
produce identical results and re-runs are bit-identical.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np
import torch

_MASK63 = (1 << 63) - 1


def derive_seed(*key) -> int:
    """Stable 63-bit seed from a tuple of ints/strings."""
    data = json.dumps(key, separators=(",", ":")).encode("utf-8")
    digest = hashlib.blake2b(data, digest_size=8).digest()
    return int.from_bytes(digest, "little") & _MASK63


def numpy_rng(*key) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*key))


def torch_generator(*key) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(*key))
    return gen
