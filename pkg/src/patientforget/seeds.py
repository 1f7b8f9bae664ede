"""Deterministic seed derivation that does not depend on PYTHONHASHSEED."""

from __future__ import annotations

import hashlib

import numpy as np


def stable_seed(*parts: object) -> int:
    """Map a tuple of ints/strings to a 63-bit seed via SHA-256."""
    h = hashlib.sha256()
    for p in parts:
        token = repr(p).encode()
        h.update(len(token).to_bytes(4, "little"))
        h.update(token)
    return int.from_bytes(h.digest()[:8], "little") >> 1


def counter_rng(seed: int, counter: int) -> np.random.Generator:
    """A Philox stream keyed by ``(seed, counter)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(counter)])))


def patient_seed(base_seed: int, patient_id: str) -> int:
    return stable_seed("patient", int(base_seed), str(patient_id))
