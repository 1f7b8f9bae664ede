"""Golden-standard retraining and the leave-one-patient-out experiment."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

from .data import Hypothesis, HypothesisLabel, LabelSource, PatientDataset, make_forget_split
from .nn import ModelArch, TrainConfig, WeightVector, evaluate, init_weights, train
from .seeds import patient_seed

EDGE_THRESHOLD = 0.5
N_BINS = 20
BIN_WIDTH = 5


@dataclass(frozen=True)
class GoldenRecord:
    forget_patient: str
    golden_df_error: float
    golden_test_error: float
    epochs_used: int
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RetrainFailure:
    forget_patient: str
    seed: int
    reason: str


@dataclass(frozen=True)
class Histogram:
    counts: tuple[int, ...]

    @property
    def bin_edges(self) -> tuple[int, ...]:
        return tuple(range(0, 100 + BIN_WIDTH, BIN_WIDTH))

    @property
    def total(self) -> int:
        return sum(self.counts)

    @classmethod
    def from_errors(cls, errors) -> "Histogram":
        counts = [0] * N_BINS
        for e in errors:
            counts[error_bin(e)] += 1
        return cls(tuple(counts))


def error_bin(error: float) -> int:
    """Bin index of an error in [0, 1]: bins are [0,5), [5,10), ..., [95,100] percent."""
    if not 0.0 <= error <= 1.0:
        raise ValueError(f"error {error} outside [0, 1]")
    # round away representation noise such as 0.05 * 100 = 5.000000000000001
    pct = round(error * 100.0, 9)
    return min(int(math.floor(pct / BIN_WIDTH)), N_BINS - 1)


def classify_hypothesis(rec: GoldenRecord, threshold: float = EDGE_THRESHOLD) -> HypothesisLabel:
    """Edge when the golden model errs on strictly more than ``threshold`` of the patient."""
    value = Hypothesis.EDGE if rec.golden_df_error > threshold else Hypothesis.CLUSTER
    return HypothesisLabel(value, LabelSource.GOLDEN_MODEL)


def retrain_seed(cfg: TrainConfig, patient: str, reuse_seed: bool = False) -> int:
    return cfg.seed if reuse_seed else patient_seed(cfg.seed, patient)


def golden_retrain(
    ds: PatientDataset,
    patient: str,
    cfg: TrainConfig,
    arch: ModelArch,
    reuse_seed: bool = False,
) -> tuple[WeightVector, GoldenRecord]:
    """Train from scratch on everything except ``patient`` and score the result.

    The seed is derived from ``(cfg.seed, patient)`` unless ``reuse_seed`` is
    set, in which case every retrain shares the original model's seed.
    """
    split = make_forget_split(ds, patient)
    seed = retrain_seed(cfg, patient, reuse_seed)
    run_cfg = cfg.replace(seed=seed)
    w = train(split.d_r.X, split.d_r.y, run_cfg, init_weights(arch, seed))
    test = ds.test_view()
    test_err = evaluate(w, test.X, test.y).error if len(test) else float("nan")
    rec = GoldenRecord(
        forget_patient=patient,
        golden_df_error=evaluate(w, split.d_f.X, split.d_f.y).error,
        golden_test_error=test_err,
        epochs_used=cfg.epochs,
        seed=seed,
    )
    return w, rec


@dataclass(frozen=True)
class SweepResult:
    records: tuple[GoldenRecord, ...]
    failures: tuple[RetrainFailure, ...]
    histogram: Histogram
    threshold: float = EDGE_THRESHOLD

    @property
    def edge_proportion(self) -> float:
        if not self.records:
            return float("nan")
        edges = sum(classify_hypothesis(r, self.threshold).value is Hypothesis.EDGE for r in self.records)
        return edges / len(self.records)

    def labels(self) -> dict[str, HypothesisLabel]:
        return {r.forget_patient: classify_hypothesis(r, self.threshold) for r in self.records}

    def __iter__(self):
        # unpacks as (records, histogram)
        return iter((list(self.records), self.histogram))


def _retrain_job(args) -> GoldenRecord | RetrainFailure:
    ds, patient, cfg, arch, reuse_seed = args
    try:
        return golden_retrain(ds, patient, cfg, arch, reuse_seed)[1]
    except (ArithmeticError, RuntimeError, ValueError) as exc:
        return RetrainFailure(patient, retrain_seed(cfg, patient, reuse_seed), f"{type(exc).__name__}: {exc}")


def leave_one_out_sweep(
    ds: PatientDataset,
    cfg: TrainConfig,
    arch: ModelArch,
    workers: int = 1,
    patients=None,
    threshold: float = EDGE_THRESHOLD,
    reuse_seed: bool = False,
) -> SweepResult:
    """One golden retrain per training patient; failures are kept aside, not fatal."""
    ids = sorted(ds.train_patients if patients is None else patients)
    if len(ds.train_patients) < 2:
        raise ValueError("a leave-one-out sweep needs at least two training patients")
    jobs = [(ds, pid, cfg, arch, reuse_seed) for pid in ids]
    if workers <= 1 or len(jobs) <= 1:
        results = [_retrain_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_retrain_job, jobs))
    records = tuple(sorted((r for r in results if isinstance(r, GoldenRecord)), key=lambda r: r.forget_patient))
    failures = tuple(sorted((r for r in results if isinstance(r, RetrainFailure)), key=lambda r: r.forget_patient))
    hist = Histogram.from_errors(r.golden_df_error for r in records)
    return SweepResult(records, failures, hist, threshold)
