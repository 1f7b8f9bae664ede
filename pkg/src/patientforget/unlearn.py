"""Forgetting by weight perturbation, and calibration of its strength.

``scrub`` spreads noise over every weight with a scale that shrinks where the
retain-set Fisher information is large. ``targeted_forget`` perturbs only the
few weights carrying the most forget-set information, with a scale that grows
with it. Both take one combined ``strength`` scalar; the per-weight scale is
``strength**0.25 * F**(-0.25)`` and ``strength**0.25 * F**0.25`` respectively.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .data import DataView, ForgetSplit
from .fisher import FimDiagonal, FimSource
from .nn import WeightVector, evaluate, predict
from .seeds import stable_seed


class Method(str, Enum):
    SCRUB = "Scrub"
    TARGETED = "Targeted"


@dataclass(frozen=True)
class PerturbSpec:
    method: Method
    strength: float
    topk_fraction: float = 0.01
    fim_floor: float = 1e-8
    noise_seed: int = 0
    deterministic: bool = False  # unit offsets instead of normal draws (ablation only)

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if not (self.strength >= 0 and math.isfinite(self.strength)):
            raise ValueError("strength must be finite and nonnegative")
        if not 0 < self.topk_fraction <= 1:
            raise ValueError("topk_fraction must lie in (0, 1]")
        if not self.fim_floor > 0:
            raise ValueError("fim_floor must be positive")


@dataclass(frozen=True)
class NoiseLevel:
    name: str
    target_df_error: float
    tolerance: float

    def band(self, n_forget: int) -> tuple[float, float]:
        lo = self.target_df_error - self.tolerance
        hi = self.target_df_error + self.tolerance
        if self.tolerance == 0 and n_forget > 0:
            # an exact target is met up to one forget sample
            lo = self.target_df_error - 1.0 / n_forget
        return max(lo, 0.0), min(hi, 1.0)


HIGH = NoiseLevel("High", 1.00, 0.0)
MEDIUM = NoiseLevel("Medium", 0.85, 0.05)
LOW = NoiseLevel("Low", 0.14, 0.05)
LEVELS = {lvl.name: lvl for lvl in (LOW, MEDIUM, HIGH)}
RELATIVE_FRACTIONS = {"High": 1.0, "Medium": 0.667, "Low": 0.300}


@dataclass(frozen=True)
class PerturbReport:
    mean_abs_noise_all_weights: float
    mean_abs_noise_perturbed_weights: float
    n_perturbed: int
    strength_used: float


class CalibrationError(RuntimeError):
    def __init__(self, msg: str, trace: Sequence[tuple[float, float]] = ()):
        super().__init__(msg)
        self.trace = tuple(trace)


class NonConvergence(CalibrationError):
    pass


class UnreachableBand(CalibrationError):
    pass


# --------------------------------------------------------------------------- operators


def scrub_sigma(fim: FimDiagonal, strength: float, fim_floor: float = 1e-8) -> np.ndarray:
    return strength**0.25 * np.maximum(fim.values, fim_floor) ** -0.25


def topk_mask(values: np.ndarray, fraction: float) -> np.ndarray:
    """Indices of the ceil(fraction*dim) largest entries; ties go to the lower index."""
    k = math.ceil(fraction * values.shape[0])
    return np.sort(np.argsort(-values, kind="stable")[:k])


def targeted_sigma(fim: FimDiagonal, strength: float, topk_fraction: float = 0.01) -> np.ndarray:
    sigma = np.zeros_like(fim.values)
    idx = topk_mask(fim.values, topk_fraction)
    sigma[idx] = strength**0.25 * fim.values[idx] ** 0.25
    return sigma


def _draw(spec: PerturbSpec, dim: int) -> np.ndarray:
    if spec.deterministic:
        return np.ones(dim)
    return np.random.default_rng(spec.noise_seed).standard_normal(dim)


def _apply(w: WeightVector, idx: np.ndarray, added: np.ndarray, strength: float) -> tuple[WeightVector, PerturbReport]:
    if strength == 0:
        return w, PerturbReport(0.0, 0.0, int(idx.size), 0.0)
    values = w.values.copy()
    values[idx] += added
    if not np.all(np.isfinite(values)):
        raise FloatingPointError("perturbation produced non-finite weights")
    abs_added = np.abs(added)
    total = float(abs_added.sum())
    report = PerturbReport(
        mean_abs_noise_all_weights=total / len(w),
        mean_abs_noise_perturbed_weights=total / idx.size if idx.size else 0.0,
        n_perturbed=int(idx.size),
        strength_used=float(strength),
    )
    return w.with_values(values), report


def scrub(w: WeightVector, fim_r: FimDiagonal, spec: PerturbSpec) -> tuple[WeightVector, PerturbReport]:
    if spec.method is not Method.SCRUB:
        raise ValueError("scrub needs a Scrub PerturbSpec")
    fim_r.check_matches(w)
    if fim_r.source is not FimSource.RETAIN_SET:
        raise ValueError(f"scrub expects a retain-set FIM, got {fim_r.source.value}")
    sigma = scrub_sigma(fim_r, spec.strength, spec.fim_floor)
    idx = np.arange(len(w))
    return _apply(w, idx, _draw(spec, len(w)) * sigma, spec.strength)


def targeted_forget(w: WeightVector, fim_f: FimDiagonal, spec: PerturbSpec) -> tuple[WeightVector, PerturbReport]:
    if spec.method is not Method.TARGETED:
        raise ValueError("targeted_forget needs a Targeted PerturbSpec")
    fim_f.check_matches(w)
    if fim_f.source is FimSource.RETAIN_SET:
        raise ValueError("targeted forgetting expects a forget-set FIM")
    idx = topk_mask(fim_f.values, spec.topk_fraction)
    scale = spec.strength**0.25 * fim_f.values[idx] ** 0.25
    return _apply(w, idx, _draw(spec, len(w))[idx] * scale, spec.strength)


def perturb(w: WeightVector, fim: FimDiagonal, spec: PerturbSpec) -> tuple[WeightVector, PerturbReport]:
    op = scrub if spec.method is Method.SCRUB else targeted_forget
    return op(w, fim, spec)


# --------------------------------------------------------------------------- calibration


def draw_seeds(noise_seed: int, eval_draws: int) -> list[int]:
    if eval_draws < 1:
        raise ValueError("eval_draws must be >= 1")
    if eval_draws == 1:
        return [int(noise_seed)]
    return [stable_seed("draw", int(noise_seed), j) for j in range(eval_draws)]


def mean_report(reports: Sequence[PerturbReport]) -> PerturbReport:
    n = len(reports)
    return PerturbReport(
        mean_abs_noise_all_weights=math.fsum(r.mean_abs_noise_all_weights for r in reports) / n,
        mean_abs_noise_perturbed_weights=math.fsum(r.mean_abs_noise_perturbed_weights for r in reports) / n,
        n_perturbed=reports[0].n_perturbed,
        strength_used=reports[0].strength_used,
    )


@dataclass(frozen=True)
class Calibration:
    strength: float
    report: PerturbReport
    df_error: float
    trace: tuple[tuple[float, float], ...] = ()

    def __iter__(self):
        # unpacks as (strength, report)
        return iter((self.strength, self.report))


def _df_error_at(w, fim, base: PerturbSpec, strength: float, seeds: Sequence[int], Xf, yf):
    errs, reports = [], []
    for s in seeds:
        w2, rep = perturb(w, fim, replace(base, strength=strength, noise_seed=s))
        errs.append(float(np.mean(predict(w2, Xf) != yf)))
        reports.append(rep)
    return math.fsum(errs) / len(errs), mean_report(reports)


def calibrate(
    w: WeightVector,
    fim: FimDiagonal,
    method: Method | str,
    level: NoiseLevel,
    split: ForgetSplit,
    eval_draws: int = 5,
    noise_seed: int = 0,
    topk_fraction: float = 0.01,
    fim_floor: float = 1e-8,
    deterministic: bool = False,
    start: float = 1e-20,
    growth: float = 10.0,
    max_strength: float = 1e24,
    max_iter: int = 60,
    refine_steps: int = 12,
    above: float = 0.0,
) -> Calibration:
    """Find a strength whose mean D_f error over ``eval_draws`` draws lies in the level's band.

    The strength grows geometrically from ``start`` until the error is no
    longer below the band, then the bracket is bisected in log space. For an
    exact target (tolerance 0) the search keeps bisecting for ``refine_steps``
    more steps after landing, to return the smallest strength that reaches it.
    With ``above`` > 0 only strengths strictly greater than it are searched,
    which keeps the levels of one noise realization in increasing order.
    """
    spec = PerturbSpec(Method(method), 0.0, topk_fraction, fim_floor, noise_seed, deterministic)
    seeds = draw_seeds(noise_seed, eval_draws)
    Xf, yf = split.d_f.X, split.d_f.y
    lo_band, hi_band = level.band(len(split.d_f))
    trace: list[tuple[float, float]] = []
    evals = 0

    def f(s: float):
        nonlocal evals
        evals += 1
        err, rep = _df_error_at(w, fim, spec, s, seeds, Xf, yf)
        trace.append((s, err))
        return err, rep

    def done(s, err, rep):
        return Calibration(s, rep, err, tuple(trace))

    if above < 0:
        raise ValueError("above must be nonnegative")
    s_lo = float(above)
    s = max(start, s_lo * growth)
    while True:
        err, rep = f(s)
        if err >= lo_band:
            break
        s_lo = s
        s *= growth
        if s > max_strength:
            raise UnreachableBand(
                f"{level.name}: D_f error stays below {lo_band:.3f} up to strength {max_strength:g}", trace
            )
    s_hi, hit = s, None
    if err <= hi_band:
        hit = (s, err, rep)
        if level.tolerance > 0 or s_lo == 0.0:
            return done(*hit)

    steps_after_hit = 0
    while evals < max_iter:
        if s_lo == 0.0:
            mid = s_hi / growth
        else:
            mid = math.sqrt(s_lo * s_hi)
        if not (s_lo < mid < s_hi):
            break
        err, rep = f(mid)
        if err < lo_band:
            s_lo = mid
        elif err > hi_band:
            s_hi = mid
        else:
            hit = (mid, err, rep)
            s_hi = mid
            if level.tolerance > 0:
                return done(*hit)
        if hit is not None:
            steps_after_hit += 1
            if steps_after_hit >= refine_steps:
                break
    if hit is not None:
        return done(*hit)
    raise NonConvergence(
        f"{level.name}: no strength in [{s_lo:g}, {s_hi:g}] gives D_f error in "
        f"[{lo_band:.3f}, {hi_band:.3f}] after {evals} evaluations",
        trace,
    )


def relative_strengths(high_strength: float) -> dict[str, float]:
    """Medium and Low as fixed fractions of the High strength."""
    return {name: frac * high_strength for name, frac in RELATIVE_FRACTIONS.items()}


# --------------------------------------------------------------------------- reporting


@dataclass(frozen=True)
class ForgettingReport:
    patient: str
    method: str
    level: str | None
    strength: float
    pre_df_error: float
    pre_dr_error: float
    pre_test_error: float
    post_df_error: float
    post_dr_error: float
    post_test_error: float
    mean_abs_noise_all_weights: float
    mean_abs_noise_perturbed_weights: float
    n_perturbed: int
    complete: bool
    golden_df_error: float | None = None
    golden_test_error: float | None = None
    delta_df_error: float | None = None
    delta_test_error: float | None = None
    n_draws: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


def complete_threshold(num_classes: int) -> float:
    """Error of a uniformly random guess; exceeding it counts as complete forgetting."""
    return 1.0 - 1.0 / num_classes


def forget_and_report(
    w: WeightVector,
    split: ForgetSplit,
    method: Method | str,
    fim: FimDiagonal,
    test: DataView,
    strength: float,
    level: NoiseLevel | None = None,
    noise_seeds: Sequence[int] = (0,),
    topk_fraction: float = 0.01,
    fim_floor: float = 1e-8,
    deterministic: bool = False,
    golden=None,
) -> ForgettingReport:
    """Apply the operator once per noise seed and average the resulting errors.

    ``golden`` may be any object with ``golden_df_error`` and
    ``golden_test_error`` attributes; deltas are reported as method minus golden.
    """
    method = Method(method)
    pre = [evaluate(w, v.X, v.y).error for v in (split.d_f, split.d_r, test)]
    posts, reports = [], []
    for seed in noise_seeds:
        spec = PerturbSpec(method, strength, topk_fraction, fim_floor, seed, deterministic)
        w2, rep = perturb(w, fim, spec)
        posts.append([evaluate(w2, v.X, v.y).error for v in (split.d_f, split.d_r, test)])
        reports.append(rep)
    post = [math.fsum(col) / len(posts) for col in zip(*posts)]
    rep = mean_report(reports)
    num_classes = w.arch.num_classes
    g_df = g_test = d_df = d_test = None
    if golden is not None:
        g_df, g_test = golden.golden_df_error, golden.golden_test_error
        d_df, d_test = post[0] - g_df, post[2] - g_test
    return ForgettingReport(
        patient=split.forget_patient,
        method=method.value,
        level=level.name if level is not None else None,
        strength=float(strength),
        pre_df_error=pre[0],
        pre_dr_error=pre[1],
        pre_test_error=pre[2],
        post_df_error=post[0],
        post_dr_error=post[1],
        post_test_error=post[2],
        mean_abs_noise_all_weights=rep.mean_abs_noise_all_weights,
        mean_abs_noise_perturbed_weights=rep.mean_abs_noise_perturbed_weights,
        n_perturbed=rep.n_perturbed,
        complete=post[0] > complete_threshold(num_classes),
        golden_df_error=g_df,
        golden_test_error=g_test,
        delta_df_error=d_df,
        delta_test_error=d_test,
        n_draws=len(posts),
    )
