"""Diagonal Fisher information, per sample, per patient and per patient set.

The per-sample term is the exact expectation over classes,
``sum_k p(k|x) * (d log p(k|x) / dw)**2``. For an MLP the squared gradient of a
weight matrix for one sample is ``outer(delta**2, a**2)``, so a whole batch
reduces to one matrix product per class and layer without ever materialising
per-sample gradients.

Reductions use a fixed order (unique sample rows in lexicographic order inside
a patient, sorted patient ids across patients), which makes the results
bitwise reproducible and exactly invariant to sample replication.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping

import numpy as np

from .nn import WeightVector, backprop, forward_activations, log_softmax
from .seeds import stable_seed

FIM_SCHEMA = "patientforget.fim/1"


class FimSource(str, Enum):
    RETAIN_SET = "RetainSet"
    FORGET_SET = "ForgetSet"
    SINGLE_PATIENT = "SinglePatient"


NORMALIZATIONS = ("mean", "l1")
EXPECTATIONS = ("exact", "sampled")


@dataclass(frozen=True, eq=False)
class FimDiagonal:
    values: np.ndarray
    source: FimSource
    n_patients: int
    arch_fingerprint: str
    normalization: str = "mean"
    expectation: str = "exact"

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("FIM diagonal must be a flat vector")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("FIM entries must be finite and nonnegative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "source", FimSource(self.source))
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.expectation not in EXPECTATIONS:
            raise ValueError(f"unknown expectation mode {self.expectation!r}")

    def __len__(self) -> int:
        return self.values.shape[0]

    def check_matches(self, w: WeightVector) -> None:
        if self.arch_fingerprint != w.arch.fingerprint() or len(self) != len(w):
            raise ValueError(
                f"FIM computed for {self.arch_fingerprint} cannot be applied to {w.arch.fingerprint()}"
            )

    def relabel(self, source: FimSource) -> "FimDiagonal":
        return FimDiagonal(self.values, source, self.n_patients, self.arch_fingerprint,
                           self.normalization, self.expectation)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FimDiagonal):
            return NotImplemented
        return (
            self.source == other.source
            and self.n_patients == other.n_patients
            and self.arch_fingerprint == other.arch_fingerprint
            and self.normalization == other.normalization
            and self.expectation == other.expectation
            and np.array_equal(self.values, other.values)
        )


def _weighted_fim(w: WeightVector, X: np.ndarray, weights: np.ndarray, rng: np.random.Generator | None) -> np.ndarray:
    """``sum_s weights[s] * E_y[(grad log p(y|x_s))**2]`` as a flat vector."""
    acts = forward_activations(w, X)
    p = np.exp(log_softmax(acts[-1]))
    n, K = p.shape
    sq_acts = [a * a for a in acts[:-1]]
    out = [np.zeros_like(W) for W, _ in w.layers()]
    out_b = [np.zeros_like(b) for _, b in w.layers()]

    if rng is None:
        classes = [(np.full(n, k), p[:, k] * weights) for k in range(K)]
    else:
        u = rng.random(n)
        drawn = np.minimum((np.cumsum(p, axis=1) < u[:, None]).sum(axis=1), K - 1)
        classes = [(drawn, weights)]

    for labels, coef in classes:
        g = -p.copy()
        g[np.arange(n), labels] += 1.0
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite log-likelihood gradient")
        for i, d in enumerate(backprop(w, acts, g)):
            d2 = coef[:, None] * (d * d)
            out[i] += d2.T @ sq_acts[i]
            out_b[i] += d2.sum(axis=0)

    parts = []
    for Wg, bg in zip(out, out_b):
        parts.append(Wg.ravel())
        parts.append(bg)
    flat = np.concatenate(parts)
    if not np.all(np.isfinite(flat)):
        raise FloatingPointError("non-finite FIM entry")
    return flat


def fim_diag_sample(w: WeightVector, x, expectation: str = "exact", seed: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != w.arch.input_dim:
        raise ValueError(f"expected a feature vector of length {w.arch.input_dim}")
    rng = _rng_for(expectation, seed)
    return _weighted_fim(w, x[None, :], np.ones(1), rng)


def _rng_for(expectation: str, seed: int | None) -> np.random.Generator | None:
    if expectation == "exact":
        return None
    if expectation == "sampled":
        return np.random.default_rng(0 if seed is None else seed)
    raise ValueError(f"unknown expectation mode {expectation!r}")


def _patient_values(w: WeightVector, X, normalization: str, expectation: str, seed: int | None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("patient has no samples")
    if X.shape[1] != w.arch.input_dim:
        raise ValueError(f"expected features of length {w.arch.input_dim}, got {X.shape[1]}")
    rng = _rng_for(expectation, seed)
    if rng is None:
        # identical rows contribute identical terms; weighting unique rows by
        # count/n keeps the mean exactly invariant to replication
        uniq, counts = np.unique(X, axis=0, return_counts=True)
        values = _weighted_fim(w, uniq, counts / X.shape[0], None)
    else:
        values = _weighted_fim(w, X, np.full(X.shape[0], 1.0 / X.shape[0]), rng)
    if normalization == "l1":
        total = values.sum()
        if total > 0:
            values = values / total
    elif normalization != "mean":
        raise ValueError(f"unknown normalization {normalization!r}")
    return values


def fim_diag_patient(
    w: WeightVector,
    patient_samples,
    normalization: str = "mean",
    expectation: str = "exact",
    seed: int | None = None,
) -> FimDiagonal:
    """Mean of the per-sample diagonal FIM over one patient's samples.

    With ``normalization="l1"`` the patient's vector is further scaled to unit
    L1 norm, so every patient contributes the same total mass.
    """
    values = _patient_values(w, patient_samples, normalization, expectation, seed)
    return FimDiagonal(values, FimSource.SINGLE_PATIENT, 1, w.arch.fingerprint(), normalization, expectation)


def combine_patient_fims(per_patient: Mapping[str, FimDiagonal], source: FimSource) -> FimDiagonal:
    """Equal-weight mean of per-patient FIMs, summed in sorted patient-id order."""
    if not per_patient:
        raise ValueError("cannot aggregate an empty patient set")
    items = sorted(per_patient.items())
    first = items[0][1]
    total = np.zeros_like(first.values)
    for _, f in items:
        if (f.arch_fingerprint, f.normalization, f.expectation) != (
            first.arch_fingerprint, first.normalization, first.expectation
        ):
            raise ValueError("per-patient FIMs disagree on architecture or provenance")
        total += f.values
    total /= len(items)
    return FimDiagonal(total, source, len(items), first.arch_fingerprint, first.normalization, first.expectation)


def fim_diag_patients(
    w: WeightVector,
    patients: Mapping[str, np.ndarray],
    normalization: str = "mean",
    expectation: str = "exact",
    seed: int | None = None,
) -> dict[str, FimDiagonal]:
    out = {}
    for pid in sorted(patients):
        s = None if seed is None else stable_seed("fim", seed, pid)
        out[pid] = fim_diag_patient(w, patients[pid], normalization, expectation, s)
    return out


def fim_diag_set(
    w: WeightVector,
    patients: Mapping[str, np.ndarray],
    source: FimSource = FimSource.RETAIN_SET,
    normalization: str = "mean",
    expectation: str = "exact",
    seed: int | None = None,
) -> FimDiagonal:
    per = fim_diag_patients(w, patients, normalization, expectation, seed)
    return combine_patient_fims(per, source)


def save_fim(path, fim: FimDiagonal, extra: Mapping | None = None) -> None:
    payload = {
        "schema": FIM_SCHEMA,
        "arch_fingerprint": fim.arch_fingerprint,
        "source": fim.source.value,
        "n_patients": fim.n_patients,
        "normalization": fim.normalization,
        "expectation": fim.expectation,
        "extra": dict(extra or {}),
        "values": [float(v) for v in fim.values],
    }
    Path(path).write_text(json.dumps(payload) + "\n")


def load_fim(path) -> tuple[FimDiagonal, dict]:
    payload = json.loads(Path(path).read_text())
    if payload.get("schema") != FIM_SCHEMA:
        raise ValueError(f"{path}: unsupported FIM schema {payload.get('schema')!r}")
    fim = FimDiagonal(
        np.array(payload["values"], dtype=np.float64),
        FimSource(payload["source"]),
        int(payload["n_patients"]),
        payload["arch_fingerprint"],
        payload["normalization"],
        payload["expectation"],
    )
    return fim, payload.get("extra", {})
