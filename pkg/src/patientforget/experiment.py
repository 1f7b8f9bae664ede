"""Forgetting experiments: calibrated perturbation repeated over trials, compared to golden retrains."""

from __future__ import annotations

import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

from .data import ForgetSplit, Hypothesis, PatientDataset, make_forget_split
from .fisher import FimDiagonal, FimSource, combine_patient_fims, fim_diag_patients
from .nn import WeightVector
from .oracle import EDGE_THRESHOLD, GoldenRecord, classify_hypothesis
from .seeds import stable_seed
from .unlearn import (
    LEVELS,
    NoiseLevel,
    RELATIVE_FRACTIONS,
    CalibrationError,
    ForgettingReport,
    Method,
    calibrate,
    draw_seeds,
    forget_and_report,
)


class FimBank:
    """Per-patient FIMs of the training set at one set of weights.

    Retain-set FIMs for any forget patient are recombined from the cached
    per-patient terms, which gives exactly what ``fim_diag_set`` would return
    on the retain split.
    """

    def __init__(self, per_patient: Mapping[str, FimDiagonal]):
        self.per_patient = dict(sorted(per_patient.items()))

    @classmethod
    def compute(cls, w: WeightVector, ds: PatientDataset, normalization: str = "mean") -> "FimBank":
        return cls(fim_diag_patients(w, ds.train_view().by_patient(), normalization))

    def retain(self, patient: str) -> FimDiagonal:
        rest = {pid: f for pid, f in self.per_patient.items() if pid != patient}
        return combine_patient_fims(rest, FimSource.RETAIN_SET)

    def forget(self, patient: str) -> FimDiagonal:
        return combine_patient_fims({patient: self.per_patient[patient]}, FimSource.FORGET_SET)

    def for_method(self, method: Method, patient: str) -> FimDiagonal:
        return self.retain(patient) if method is Method.SCRUB else self.forget(patient)


@dataclass(frozen=True)
class ForgetSettings:
    methods: tuple[str, ...] = ("Scrub", "Targeted")
    levels: tuple[str, ...] = ("Low", "Medium", "High")
    trials: int = 3
    eval_draws: int = 1
    exact_eval_draws: int = 1
    max_attempts: int = 8
    relative_levels: bool = False
    topk_fraction: float = 0.01
    fim_floor: float = 1e-8
    deterministic: bool = False
    base_seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"], d["levels"] = list(self.methods), list(self.levels)
        return d

    def draws_for(self, level: NoiseLevel) -> int:
        # an exact target such as 1.00 is a property of a single draw: averaged
        # over draws, zero-mean noise saturates near chance error instead
        return self.exact_eval_draws if level.tolerance == 0 else self.eval_draws


@dataclass(frozen=True)
class TrialResult:
    trial: int
    attempts: int
    noise_seed: int | None
    report: ForgettingReport | None
    trace: tuple[tuple[float, float], ...] = ()
    failure: str | None = None


@dataclass(frozen=True)
class CellResult:
    patient: str
    method: str
    level: str
    trials: tuple[TrialResult, ...] = field(default_factory=tuple)

    @property
    def reports(self) -> list[ForgettingReport]:
        return [t.report for t in self.trials if t.report is not None]

    @property
    def failed(self) -> bool:
        return any(t.report is None for t in self.trials)

    def stat(self, name: str) -> tuple[float, float]:
        """Mean and sample standard deviation of a report field over successful trials."""
        vals = [getattr(r, name) for r in self.reports]
        vals = [v for v in vals if v is not None]
        if not vals:
            return float("nan"), float("nan")
        mean = math.fsum(vals) / len(vals)
        sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
        return mean, sd


def trial_seed(base_seed: int, patient: str, method: str, trial: int, attempt: int) -> int:
    return stable_seed("trial", base_seed, patient, method, trial, attempt)


def run_method(
    w: WeightVector,
    split: ForgetSplit,
    test,
    method: Method,
    fim: FimDiagonal,
    settings: ForgetSettings,
    golden: GoldenRecord | None = None,
) -> list[CellResult]:
    """All requested levels for one (patient, method), repeated over trials.

    Each trial is an independent noise realization, calibrated on its own. A
    realization whose D_f error never enters one of the bands (for instance one
    that saturates on the correct class) is replaced by a fresh one, up to
    ``max_attempts`` times.
    """
    patient = split.forget_patient
    per_level: dict[str, list[TrialResult]] = {lvl: [] for lvl in settings.levels}
    common = dict(
        topk_fraction=settings.topk_fraction,
        fim_floor=settings.fim_floor,
        deterministic=settings.deterministic,
    )

    def report(strength, level, seed, draws):
        return forget_and_report(
            w, split, method, fim, test, strength, level,
            noise_seeds=draw_seeds(seed, draws), golden=golden, **common,
        )

    for t in range(settings.trials):
        if settings.relative_levels:
            res = _relative_trial(w, split, method, fim, settings, t, report, common)
        else:
            res = _levels_trial(w, split, method, fim, settings, t, report, common)
        for lvl in settings.levels:
            per_level[lvl].append(res[lvl])
    return [CellResult(patient, method.value, lvl, tuple(per_level[lvl])) for lvl in settings.levels]


def _levels_trial(w, split, method, fim, settings, t, report, common) -> dict[str, TrialResult]:
    # every level of one trial is calibrated on the same noise realization, in
    # increasing target order and each above the previous strength; a
    # realization that cannot reach one of the bands is replaced as a whole
    last_err = ""
    for attempt in range(settings.max_attempts):
        seed = trial_seed(settings.base_seed, split.forget_patient, method.value, t, attempt)
        cals = {}
        floor = 0.0
        try:
            for lvl in sorted(settings.levels, key=lambda name: LEVELS[name].target_df_error):
                draws = settings.draws_for(LEVELS[lvl])
                cals[lvl] = calibrate(w, fim, method, LEVELS[lvl], split, eval_draws=draws, noise_seed=seed,
                                      above=floor, **common)
                floor = cals[lvl].strength
        except CalibrationError as exc:
            last_err = str(exc)
            continue
        return {
            lvl: TrialResult(t, attempt + 1, seed,
                             report(c.strength, LEVELS[lvl], seed, settings.draws_for(LEVELS[lvl])), c.trace)
            for lvl in settings.levels
            for c in (cals[lvl],)
        }
    return {lvl: TrialResult(t, settings.max_attempts, None, None, (), last_err) for lvl in settings.levels}


def _relative_trial(w, split, method, fim, settings, t, report, common) -> dict[str, TrialResult]:
    high = LEVELS["High"]
    draws = settings.draws_for(high)
    last_err = ""
    for attempt in range(settings.max_attempts):
        seed = trial_seed(settings.base_seed, split.forget_patient, method.value, t, attempt)
        try:
            cal = calibrate(w, fim, method, high, split, eval_draws=draws, noise_seed=seed, **common)
        except CalibrationError as exc:
            last_err = str(exc)
            continue
        return {
            lvl: TrialResult(t, attempt + 1, seed,
                             report(RELATIVE_FRACTIONS[lvl] * cal.strength, LEVELS[lvl], seed, draws),
                             cal.trace if lvl == "High" else ())
            for lvl in settings.levels
        }
    return {lvl: TrialResult(t, settings.max_attempts, None, None, (), last_err) for lvl in settings.levels}


def _cell_job(args) -> list[CellResult]:
    w, ds, patient, method, bank_entry, settings, golden = args
    split = make_forget_split(ds, patient)
    return run_method(w, split, ds.test_view(), Method(method), bank_entry, settings, golden)


def run_forgetting(
    w: WeightVector,
    ds: PatientDataset,
    patients: Sequence[str],
    settings: ForgetSettings,
    bank: FimBank,
    goldens: Mapping[str, GoldenRecord] | None = None,
    workers: int = 1,
) -> list[CellResult]:
    """Every (patient, method) pair; results sorted by patient, method and level order."""
    goldens = goldens or {}
    jobs = []
    for pid in sorted(patients):
        for m in settings.methods:
            method = Method(m)
            jobs.append((w, ds, pid, method.value, bank.for_method(method, pid), settings, goldens.get(pid)))
    if workers <= 1 or len(jobs) <= 1:
        results = [_cell_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_cell_job, jobs))
    return [cell for group in results for cell in group]


def select_patients(
    records: Sequence[GoldenRecord],
    threshold: float = EDGE_THRESHOLD,
    truth: Mapping[str, Hypothesis] | None = None,
) -> dict[str, str]:
    """One edge and one cluster patient from a leave-one-out sweep.

    The edge patient is the golden-model edge case with the highest golden
    D_f error, the cluster patient the cluster case with the lowest; ties go
    to the lowest patient id. When ground truth is known, only patients whose
    golden label agrees with it are eligible.
    """
    chosen = {}
    for hyp, key in ((Hypothesis.EDGE, lambda r: (-r.golden_df_error, r.forget_patient)),
                     (Hypothesis.CLUSTER, lambda r: (r.golden_df_error, r.forget_patient))):
        pool = [
            r for r in records
            if classify_hypothesis(r, threshold).value is hyp
            and (truth is None or truth.get(r.forget_patient) is hyp)
        ]
        if pool:
            chosen[hyp.value] = min(pool, key=key).forget_patient
    return chosen
