"""Command-line entry point: generate, train, eval, sweep, forget, report.

Every option can also come from a JSON object given with ``--config``; keys are
option names (``edge_fraction`` or ``edge-fraction``) and flags on the command
line win. Reports are JSON lines whose first record is a header with the
schema version, tool version and the fully resolved configuration. Wall-clock
timings go to a ``.timings.json`` sidecar so reports stay byte-identical
between runs.

Exit codes: 0 success, 1 usage error, 2 partial failures recorded in the
report, 3 fatal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__
from .data import (
    DatasetFormatError,
    Hypothesis,
    SynthSpec,
    dataset_digest,
    generate,
    load,
    load_manifest,
    make_forget_split,
    save,
    save_manifest,
)
from .experiment import FimBank, ForgetSettings, run_forgetting, select_patients
from .fisher import FimDiagonal, FimSource, fim_diag_patients, combine_patient_fims, load_fim, save_fim
from .nn import ModelArch, TrainConfig, TrainingDiverged, evaluate, init_weights, load_checkpoint, save_checkpoint, train
from .oracle import (
    EDGE_THRESHOLD,
    BIN_WIDTH,
    GoldenRecord,
    classify_hypothesis,
    golden_retrain,
    leave_one_out_sweep,
)
from .unlearn import LEVELS, Method

REPORT_SCHEMA = "patientforget.report/1"

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL, EXIT_FATAL = 0, 1, 2, 3

# options that change how a command runs but not what it computes; they are
# kept out of the config echo so reports compare equal across them
EXECUTION_ONLY = {"workers", "config", "out", "timings"}


class UsageError(Exception):
    pass


class FatalError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 by default
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------- option parsing


def _int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    if text.lower() in ("", "none"):
        return ()
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _name_list(choices: Sequence[str]) -> Callable[[str], tuple[str, ...]]:
    lookup = {c.lower(): c for c in choices}

    def parse(text: str) -> tuple[str, ...]:
        names = [t.strip() for t in text.split(",") if t.strip()]
        out = []
        for n in names:
            if n.lower() not in lookup:
                raise argparse.ArgumentTypeError(f"unknown value {n!r}; choose from {', '.join(choices)}")
            out.append(lookup[n.lower()])
        if not out:
            raise argparse.ArgumentTypeError("empty list")
        return tuple(out)

    return parse


DEFAULTS: dict[str, dict[str, Any]] = {}


def _opt(p: argparse.ArgumentParser, cmd: str, flag: str, default=None, **kw):
    """Add an option whose default is resolved later (config file, then built-in)."""
    dest = flag.lstrip("-").replace("-", "_")
    DEFAULTS.setdefault(cmd, {})[dest] = default
    p.add_argument(flag, dest=dest, default=None, **kw)


def _synth_options(p, cmd):
    d = SynthSpec()
    _opt(p, cmd, "--num-classes", d.num_classes, type=int)
    _opt(p, cmd, "--input-dim", d.input_dim, type=int)
    _opt(p, cmd, "--patients-per-class", d.patients_per_class_train, type=int)
    _opt(p, cmd, "--patients-test", d.patients_test, type=int)
    _opt(p, cmd, "--samples-per-patient", d.samples_per_patient, type=int)
    _opt(p, cmd, "--cluster-spread", d.cluster_spread, type=float)
    _opt(p, cmd, "--sample-spread", d.sample_spread, type=float)
    _opt(p, cmd, "--edge-offset", d.edge_offset, type=float)
    _opt(p, cmd, "--edge-fraction", d.edge_fraction, type=float)
    _opt(p, cmd, "--centroid-radius", d.centroid_radius, type=float)
    _opt(p, cmd, "--edge-pull", d.edge_pull, type=float)
    _opt(p, cmd, "--test-edge-fraction", None, type=float, help="default: same as --edge-fraction")
    _opt(p, cmd, "--test-shares-edges", d.test_shares_edges, action=argparse.BooleanOptionalAction)
    _opt(p, cmd, "--seed", d.seed, type=int)


DEFAULT_HIDDEN = (256,)


def _train_options(p, cmd):
    d = TrainConfig()
    _opt(p, cmd, "--hidden", ",".join(map(str, DEFAULT_HIDDEN)), type=str,
         help="comma-separated hidden layer sizes, or 'none' for softmax regression")
    _opt(p, cmd, "--activation", "relu", choices=["relu", "tanh"])
    _opt(p, cmd, "--lr", d.learning_rate, type=float)
    _opt(p, cmd, "--epochs", d.epochs, type=int)
    _opt(p, cmd, "--beta1", d.adam_beta1, type=float)
    _opt(p, cmd, "--beta2", d.adam_beta2, type=float)
    _opt(p, cmd, "--batch-size", d.batch_size, type=int)
    _opt(p, cmd, "--train-seed", d.seed, type=int)


def build_parser() -> _Parser:
    parser = _Parser(prog="patientforget", description="Patient-wise forgetting experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name: str, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file with option defaults")
        return p

    p = command("generate", "write a synthetic patient dataset and its ground-truth manifest")
    _opt(p, "generate", "--out", "dataset.jsonl")
    _opt(p, "generate", "--manifest", None, help="default: <out stem>.manifest.json")
    _synth_options(p, "generate")

    p = command("train", "train a classifier on the training split")
    _opt(p, "train", "--data", None)
    _opt(p, "train", "--out", "model.json")
    _train_options(p, "train")

    p = command("eval", "error rates of a checkpoint")
    _opt(p, "eval", "--data", None)
    _opt(p, "eval", "--checkpoint", None)
    _opt(p, "eval", "--split", "test", choices=["train", "test", "both"])
    _opt(p, "eval", "--per-patient", False, action=argparse.BooleanOptionalAction)

    p = command("sweep", "leave-one-patient-out golden retraining")
    _opt(p, "sweep", "--data", None)
    _opt(p, "sweep", "--out", "sweep.jsonl")
    _train_options(p, "sweep")
    _opt(p, "sweep", "--threshold", EDGE_THRESHOLD, type=float)
    _opt(p, "sweep", "--reuse-seed", False, action=argparse.BooleanOptionalAction)
    _opt(p, "sweep", "--patients", None, help="comma-separated subset (default: all training patients)")
    _opt(p, "sweep", "--workers", 1, type=int)

    p = command("forget", "calibrated forgetting of patients, compared to golden retrains")
    _opt(p, "forget", "--data", None)
    _opt(p, "forget", "--checkpoint", None)
    _opt(p, "forget", "--out", "forget.jsonl")
    _opt(p, "forget", "--patients", "auto", help="comma-separated ids, or 'auto' (one edge and one cluster)")
    _opt(p, "forget", "--sweep", None, help="sweep report providing golden records and auto selection")
    _opt(p, "forget", "--manifest", None, help="ground-truth manifest restricting auto selection")
    _opt(p, "forget", "--golden", True, action=argparse.BooleanOptionalAction,
         help="retrain golden models for patients missing from the sweep report")
    _opt(p, "forget", "--methods", "Scrub,Targeted", type=_name_list([m.value for m in Method]))
    _opt(p, "forget", "--levels", "Low,Medium,High", type=_name_list(list(LEVELS)))
    _opt(p, "forget", "--trials", 3, type=int)
    _opt(p, "forget", "--eval-draws", 1, type=int)
    _opt(p, "forget", "--max-attempts", 8, type=int)
    _opt(p, "forget", "--relative-levels", False, action=argparse.BooleanOptionalAction)
    _opt(p, "forget", "--topk-fraction", 0.01, type=float)
    _opt(p, "forget", "--fim-floor", 1e-8, type=float)
    _opt(p, "forget", "--fim-normalization", "mean", choices=["mean", "l1"])
    _opt(p, "forget", "--deterministic-noise", False, action=argparse.BooleanOptionalAction)
    _opt(p, "forget", "--threshold", EDGE_THRESHOLD, type=float)
    _opt(p, "forget", "--base-seed", 0, type=int)
    _opt(p, "forget", "--fim-cache", None, help="directory for cached FIM files")
    _opt(p, "forget", "--workers", 1, type=int)

    p = command("report", "render reports as text tables and plot columns")
    p.add_argument("inputs", nargs="+", help="report files written by sweep or forget")
    _opt(p, "report", "--curves", False, action=argparse.BooleanOptionalAction,
         help="also print calibration curves (strength vs D_f error)")
    return parser


def resolve(args: argparse.Namespace) -> dict[str, Any]:
    """Built-in defaults, overridden by the config file, overridden by flags."""
    cmd = args.command
    resolved = dict(DEFAULTS.get(cmd, {}))
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        for key, value in loaded.items():
            dest = key.replace("-", "_")
            if dest not in resolved:
                raise UsageError(f"unknown config key {key!r} for {cmd}")
            resolved[dest] = value
    for key, value in vars(args).items():
        if key in resolved and value is not None:
            resolved[key] = value
    if cmd == "report":
        resolved["inputs"] = list(args.inputs)
    return resolved


def _coerce(opts: dict[str, Any]) -> dict[str, Any]:
    # config-file values arrive as plain JSON; normalize the list-valued options
    if isinstance(opts.get("hidden"), str):
        opts["hidden"] = list(_int_list(opts["hidden"]))
    elif isinstance(opts.get("hidden"), (list, tuple)):
        opts["hidden"] = [int(h) for h in opts["hidden"]]
    for key, choices in (("methods", [m.value for m in Method]), ("levels", list(LEVELS))):
        if key in opts:
            v = opts[key]
            try:
                opts[key] = list(_name_list(choices)(v if isinstance(v, str) else ",".join(v)))
            except argparse.ArgumentTypeError as exc:
                raise UsageError(f"--{key}: {exc}") from None
    if isinstance(opts.get("patients"), (list, tuple)):
        opts["patients"] = ",".join(opts["patients"])
    return opts


def config_echo(opts: dict[str, Any]) -> dict[str, Any]:
    return {k: opts[k] for k in sorted(opts) if k not in EXECUTION_ONLY}


# --------------------------------------------------------------------------- I/O helpers


def _require(opts, *keys):
    for k in keys:
        if opts.get(k) in (None, ""):
            raise UsageError(f"--{k.replace('_', '-')} is required")


def _load_data(path):
    try:
        return load(path)
    except FileNotFoundError:
        raise FatalError(f"dataset not found: {path}") from None
    except (DatasetFormatError, ValueError) as exc:
        raise FatalError(str(exc)) from None


def _load_model(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise FatalError(f"checkpoint not found: {path}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise FatalError(f"{path}: malformed checkpoint ({exc})") from None


def _arch_and_cfg(opts, input_dim: int, num_classes: int) -> tuple[ModelArch, TrainConfig]:
    try:
        arch = ModelArch(input_dim, tuple(opts["hidden"]), num_classes, opts["activation"])
        cfg = TrainConfig(
            learning_rate=opts["lr"], epochs=opts["epochs"], adam_beta1=opts["beta1"],
            adam_beta2=opts["beta2"], batch_size=opts["batch_size"], seed=opts["train_seed"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return arch, cfg


def _header(kind: str, opts, **extra) -> dict:
    return {
        "schema_version": REPORT_SCHEMA,
        "kind": kind,
        "tool_version": __version__,
        "config": config_echo(opts),
        **extra,
    }


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def write_report(path, rows: list[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for row in rows:
            fh.write(_dumps(row) + "\n")


def write_timings(path, timings: dict) -> None:
    Path(str(path) + ".timings.json").write_text(json.dumps(timings, indent=1, sort_keys=True) + "\n")


def read_report(path) -> list[dict]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise FatalError(f"cannot read report {path}: {exc}") from None
    rows = []
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise FatalError(f"{path}: line {i + 1} is not valid JSON ({exc.msg})") from None
    if rows and rows[0].get("schema_version") != REPORT_SCHEMA:
        raise FatalError(f"{path}: unsupported report schema {rows[0].get('schema_version')!r}")
    return rows


def _finite(x):
    return None if x is None or (isinstance(x, float) and not math.isfinite(x)) else x


# --------------------------------------------------------------------------- commands


def cmd_generate(opts) -> int:
    try:
        spec = SynthSpec(
            num_classes=opts["num_classes"], input_dim=opts["input_dim"],
            patients_per_class_train=opts["patients_per_class"], patients_test=opts["patients_test"],
            samples_per_patient=opts["samples_per_patient"], cluster_spread=opts["cluster_spread"],
            sample_spread=opts["sample_spread"], edge_offset=opts["edge_offset"],
            edge_fraction=opts["edge_fraction"], seed=opts["seed"], centroid_radius=opts["centroid_radius"],
            edge_pull=opts["edge_pull"], test_edge_fraction=opts["test_edge_fraction"],
            test_shares_edges=bool(opts["test_shares_edges"]),
        )
    except ValueError as exc:
        raise UsageError(f"invalid synthetic spec: {exc}") from None
    gen = generate(spec)
    out = Path(opts["out"])
    manifest = Path(opts["manifest"]) if opts["manifest"] else out.with_name(out.stem + ".manifest.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    save(gen.dataset, out)
    save_manifest(gen, manifest)
    n_edge = len(gen.train_ids(Hypothesis.EDGE))
    print(f"wrote {out} ({len(gen.dataset.train_patients)} train / {len(gen.dataset.test_patients)} test patients, "
          f"{n_edge} edge) and {manifest}")
    return EXIT_OK


def cmd_train(opts) -> int:
    _require(opts, "data")
    ds = _load_data(opts["data"])
    arch, cfg = _arch_and_cfg(opts, ds.input_dim, ds.num_classes)
    view = ds.train_view()
    if not len(view):
        raise FatalError("the dataset has no training samples")
    t0 = time.perf_counter()
    try:
        w = train(view.X, view.y, cfg, init_weights(arch, cfg.seed))
    except TrainingDiverged as exc:
        raise FatalError(f"training failed: {exc}") from None
    elapsed = time.perf_counter() - t0
    Path(opts["out"]).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(opts["out"], w, cfg, {"dataset_digest": dataset_digest(ds), "tool_version": __version__})
    train_err = evaluate(w, view.X, view.y).error
    print(_dumps({"checkpoint": str(opts["out"]), "train_error": train_err, "n_params": len(w)}))
    write_timings(opts["out"], {"train_seconds": elapsed})
    return EXIT_OK


def cmd_eval(opts) -> int:
    _require(opts, "data", "checkpoint")
    ds = _load_data(opts["data"])
    w, _, _ = _load_model(opts["checkpoint"])
    if w.arch.input_dim != ds.input_dim or w.arch.num_classes != ds.num_classes:
        raise FatalError(f"checkpoint architecture {w.arch.fingerprint()} does not fit the dataset "
                         f"({ds.input_dim} features, {ds.num_classes} classes)")
    splits = ["train", "test"] if opts["split"] == "both" else [opts["split"]]
    for split in splits:
        view = ds.train_view() if split == "train" else ds.test_view()
        if not len(view):
            raise FatalError(f"the {split} split is empty")
        res = evaluate(w, view.X, view.y, view.patient_ids)
        row = {"split": split, "error": res.error, "n_samples": res.n_samples, "n_correct": res.n_correct}
        if opts["per_patient"]:
            row["per_patient_error"] = res.per_patient_error
        print(_dumps(row))
    return EXIT_OK


def cmd_sweep(opts) -> int:
    _require(opts, "data")
    ds = _load_data(opts["data"])
    arch, cfg = _arch_and_cfg(opts, ds.input_dim, ds.num_classes)
    patients = None
    if opts["patients"]:
        patients = [p.strip() for p in str(opts["patients"]).split(",") if p.strip()]
        unknown = [p for p in patients if p not in ds.train_patients]
        if unknown:
            raise UsageError(f"not training patients: {', '.join(unknown)}")
    if opts["workers"] < 1:
        raise UsageError("--workers must be >= 1")
    t0 = time.perf_counter()
    try:
        res = leave_one_out_sweep(ds, cfg, arch, workers=opts["workers"], patients=patients,
                                  threshold=opts["threshold"], reuse_seed=bool(opts["reuse_seed"]))
    except ValueError as exc:
        raise FatalError(str(exc)) from None
    elapsed = time.perf_counter() - t0
    rows = [_header("sweep", opts, dataset_digest=dataset_digest(ds), arch=arch.to_dict(),
                    train_config=asdict(cfg))]
    for r in res.records:
        rows.append({"type": "golden", **r.to_dict(),
                     "hypothesis": classify_hypothesis(r, res.threshold).value.value})
    for f in res.failures:
        rows.append({"type": "failure", **asdict(f)})
    hist = res.histogram
    rows.append({"type": "histogram", "bin_edges": list(hist.bin_edges), "counts": list(hist.counts),
                 "total": hist.total, "epochs": cfg.epochs})
    rows.append({"type": "summary", "n_records": len(res.records), "n_failures": len(res.failures),
                 "edge_proportion": _finite(res.edge_proportion), "threshold": res.threshold,
                 "epochs": cfg.epochs})
    write_report(opts["out"], rows)
    write_timings(opts["out"], {"sweep_seconds": elapsed, "workers": opts["workers"]})
    print(f"{len(res.records)} retrains, {len(res.failures)} failed, edge proportion "
          f"{res.edge_proportion:.3f} -> {opts['out']}")
    return EXIT_PARTIAL if res.failures else EXIT_OK


def _sweep_records(path) -> tuple[dict, list[GoldenRecord]]:
    rows = read_report(path)
    if not rows or rows[0].get("kind") != "sweep":
        raise FatalError(f"{path} is not a sweep report")
    fields = GoldenRecord.__dataclass_fields__
    recs = [GoldenRecord(**{k: r[k] for k in fields}) for r in rows[1:] if r.get("type") == "golden"]
    return rows[0], recs


def _fim_cache_key(w_digest: str, fingerprint: str, ds_digest: str, patient: str, source: FimSource,
                   normalization: str) -> str:
    text = "|".join([fingerprint, w_digest, ds_digest, patient, source.value, normalization])
    return hashlib.sha256(text.encode()).hexdigest()[:32]


class FimProvider:
    """Retain- and forget-set FIMs, optionally cached on disk.

    A cached file is used only if the architecture fingerprint, checkpoint
    digest, dataset digest, patient, source and normalization all match.
    """

    def __init__(self, w, ds, normalization: str, cache_dir: str | None):
        self.w, self.ds, self.normalization = w, ds, normalization
        self.cache = Path(cache_dir) if cache_dir else None
        self.meta = {
            "arch_fingerprint": w.arch.fingerprint(),
            "checkpoint_digest": w.digest(),
            "dataset_digest": dataset_digest(ds),
            "normalization": normalization,
        }
        self._per_patient = None
        self.hits = self.misses = 0

    def _bank(self):
        if self._per_patient is None:
            self._per_patient = fim_diag_patients(self.w, self.ds.train_view().by_patient(), self.normalization)
        return self._per_patient

    def _compute(self, patient: str, source: FimSource) -> FimDiagonal:
        per = self._bank()
        if source is FimSource.RETAIN_SET:
            return combine_patient_fims({p: f for p, f in per.items() if p != patient}, source)
        return combine_patient_fims({patient: per[patient]}, source)

    def get(self, patient: str, source: FimSource) -> FimDiagonal:
        if self.cache is None:
            return self._compute(patient, source)
        meta = {**self.meta, "patient": patient, "source": source.value}
        key = _fim_cache_key(self.meta["checkpoint_digest"], self.meta["arch_fingerprint"],
                             self.meta["dataset_digest"], patient, source, self.normalization)
        path = self.cache / f"fim-{key}.json"
        if path.exists():
            try:
                fim, extra = load_fim(path)
                if extra == meta and fim.source is source:
                    self.hits += 1
                    return fim
            except (ValueError, KeyError, json.JSONDecodeError):
                pass
        self.misses += 1
        fim = self._compute(patient, source)
        self.cache.mkdir(parents=True, exist_ok=True)
        save_fim(path, fim, meta)
        return fim


class _StaticBank(FimBank):
    """FimBank facade over a FimProvider, so cached FIMs feed run_forgetting."""

    def __init__(self, provider: FimProvider):
        self.provider = provider

    def retain(self, patient):
        return self.provider.get(patient, FimSource.RETAIN_SET)

    def forget(self, patient):
        return self.provider.get(patient, FimSource.FORGET_SET)


def cmd_forget(opts) -> int:
    _require(opts, "data", "checkpoint")
    ds = _load_data(opts["data"])
    w, train_cfg, _ = _load_model(opts["checkpoint"])
    if w.arch.input_dim != ds.input_dim or w.arch.num_classes != ds.num_classes:
        raise FatalError(f"checkpoint architecture {w.arch.fingerprint()} does not fit the dataset")
    for key in ("trials", "max_attempts", "eval_draws", "workers"):
        if opts[key] < 1:
            raise UsageError(f"--{key.replace('_', '-')} must be >= 1")
    ds_digest = dataset_digest(ds)

    goldens: dict[str, GoldenRecord] = {}
    sweep_header = None
    if opts["sweep"]:
        sweep_header, recs = _sweep_records(opts["sweep"])
        if sweep_header.get("dataset_digest") != ds_digest:
            raise FatalError(f"sweep report {opts['sweep']} was computed on a different dataset")
        goldens = {r.forget_patient: r for r in recs}

    selection = None
    if str(opts["patients"]).strip().lower() == "auto":
        if not goldens:
            raise UsageError("--patients auto needs a --sweep report")
        truth = None
        if opts["manifest"]:
            try:
                truth = {p: lbl.value for p, lbl in load_manifest(opts["manifest"]).items()}
            except (OSError, ValueError, KeyError) as exc:
                raise FatalError(f"cannot read manifest: {exc}") from None
        selection = select_patients(list(goldens.values()), opts["threshold"], truth)
        patients = sorted(set(selection.values()))
        if not patients:
            raise FatalError("auto selection found no eligible patient")
    else:
        patients = sorted({p.strip() for p in str(opts["patients"]).split(",") if p.strip()})
        for p in patients:
            try:
                make_forget_split(ds, p)
            except (KeyError, ValueError) as exc:
                raise UsageError(exc.args[0]) from None

    t0 = time.perf_counter()
    if opts["golden"]:
        if train_cfg is None:
            raise FatalError("checkpoint carries no training config, cannot retrain golden models")
        for p in patients:
            if p not in goldens:
                goldens[p] = golden_retrain(ds, p, train_cfg, w.arch)[1]
    t_golden = time.perf_counter() - t0

    settings = ForgetSettings(
        methods=tuple(opts["methods"]), levels=tuple(opts["levels"]), trials=opts["trials"],
        eval_draws=opts["eval_draws"], max_attempts=opts["max_attempts"],
        relative_levels=bool(opts["relative_levels"]), topk_fraction=opts["topk_fraction"],
        fim_floor=opts["fim_floor"], deterministic=bool(opts["deterministic_noise"]), base_seed=opts["base_seed"],
    )
    provider = FimProvider(w, ds, opts["fim_normalization"], opts["fim_cache"])
    t1 = time.perf_counter()
    try:
        cells = run_forgetting(w, ds, patients, settings, _StaticBank(provider),
                               {p: goldens[p] for p in patients if p in goldens}, workers=opts["workers"])
    except ValueError as exc:
        raise FatalError(str(exc)) from None
    t_forget = time.perf_counter() - t1

    rows = [_header("forget", opts, dataset_digest=ds_digest, checkpoint_digest=w.digest(),
                    arch=w.arch.to_dict(), settings=settings.to_dict(), patients=patients, selection=selection)]
    for p in patients:
        if p in goldens:
            g = goldens[p]
            rows.append({"type": "golden", **g.to_dict(),
                         "hypothesis": classify_hypothesis(g, opts["threshold"]).value.value})
    stat_fields = ("strength", "post_df_error", "post_dr_error", "post_test_error", "delta_df_error",
                   "delta_test_error", "mean_abs_noise_all_weights", "mean_abs_noise_perturbed_weights")
    n_failed = 0
    for cell in cells:
        for t in cell.trials:
            rows.append({
                "type": "trial", "patient": cell.patient, "method": cell.method, "level": cell.level,
                "trial": t.trial, "attempts": t.attempts, "noise_seed": t.noise_seed, "failure": t.failure,
                "report": t.report.to_dict() if t.report else None,
                "trace": [list(pt) for pt in t.trace],
            })
        n_failed += cell.failed
        stats = {}
        for f in stat_fields:
            mean, sd = cell.stat(f)
            stats[f] = [_finite(mean), _finite(sd)]
        rows.append({
            "type": "cell", "patient": cell.patient, "method": cell.method, "level": cell.level,
            "n_trials": len(cell.trials), "n_ok": len(cell.reports), "failed": cell.failed,
            "complete_fraction": _finite(sum(r.complete for r in cell.reports) / len(cell.reports))
            if cell.reports else None,
            "stats": stats,
        })
    rows.append({"type": "summary", "n_cells": len(cells), "n_failed_cells": n_failed})
    write_report(opts["out"], rows)
    write_timings(opts["out"], {"golden_seconds": t_golden, "forget_seconds": t_forget,
                                "workers": opts["workers"], "fim_cache_hits": provider.hits,
                                "fim_cache_misses": provider.misses})
    print(f"{len(cells)} cells for {len(patients)} patient(s), {n_failed} with failed trials -> {opts['out']}")
    return EXIT_PARTIAL if n_failed else EXIT_OK


# --------------------------------------------------------------------------- report rendering


def _pm(pair) -> str:
    if pair is None or pair[0] is None:
        return "n/a"
    mean, sd = pair
    return f"{mean:.3f}±{(sd or 0.0):.3f}"


def _sci(pair) -> str:
    if pair is None or pair[0] is None:
        return "n/a"
    return f"{pair[0]:.2E}"


def _table(header: list[str], body: list[list[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [header, *body]) for i in range(len(header))]
    fmt = lambda r: "  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip()
    return "\n".join([fmt(header), fmt(["-" * w for w in widths]), *map(fmt, body)])


def render_forget(rows: list[dict], curves: bool) -> str:
    header = rows[0]
    goldens = {r["forget_patient"]: r for r in rows if r.get("type") == "golden"}
    cells = {(r["patient"], r["method"], r["level"]): r for r in rows if r.get("type") == "cell"}
    if not cells:
        return "no rows"
    settings = header.get("settings", {})
    methods = settings.get("methods") or sorted({k[1] for k in cells})
    levels = settings.get("levels") or sorted({k[2] for k in cells})
    patients = header.get("patients") or sorted({k[0] for k in cells})
    cols = [f"{m} {lvl}" for m in methods for lvl in levels]
    out = ["Error on D_f and D_test (mean±sd over trials; golden = retrained without the patient)", ""]
    body = []
    for p in patients:
        g = goldens.get(p)
        tag = f"{p} ({g['hypothesis']})" if g else p
        for label, key, gkey in (("D_f", "post_df_error", "golden_df_error"),
                                 ("D_test", "post_test_error", "golden_test_error")):
            row = [tag if label == "D_f" else "", label, f"{g[gkey]:.3f}" if g else "n/a"]
            for m in methods:
                for lvl in levels:
                    c = cells.get((p, m, lvl))
                    row.append("failed" if c is None or not c["n_ok"] else _pm(c["stats"][key]))
            body.append(row)
    out.append(_table(["patient", "set", "golden", *cols], body))
    out += ["", "Mean absolute added noise (all weights / perturbed weights only)", ""]
    body = []
    for p in patients:
        for m in methods:
            row = [p, m]
            for lvl in levels:
                c = cells.get((p, m, lvl))
                if c is None or not c["n_ok"]:
                    row.append("failed")
                else:
                    row.append(f"{_sci(c['stats']['mean_abs_noise_all_weights'])} / "
                               f"{_sci(c['stats']['mean_abs_noise_perturbed_weights'])}")
            body.append(row)
    out.append(_table(["patient", "method", *levels], body))
    failed = [k for k, c in cells.items() if c["failed"]]
    if failed:
        out += ["", "cells with failed trials: " + ", ".join("/".join(k) for k in failed)]
    if curves:
        out += ["", "Calibration curves (one line per evaluated strength)", ""]
        body = []
        for r in rows:
            if r.get("type") == "trial":
                for s, e in r.get("trace", []):
                    body.append([r["patient"], r["method"], r["level"], str(r["trial"]), f"{s:.6e}", f"{e:.4f}"])
        out.append(_table(["patient", "method", "level", "trial", "strength", "df_error"], body) if body
                   else "no calibration traces")
    return "\n".join(out)


def render_sweeps(reports: list[tuple[str, list[dict]]]) -> str:
    hists, summaries, names = [], [], []
    for name, rows in reports:
        h = next((r for r in rows if r.get("type") == "histogram"), None)
        s = next((r for r in rows if r.get("type") == "summary"), None)
        if h is None:
            continue
        hists.append(h)
        summaries.append(s or {})
        names.append(f"{Path(name).name} ({h.get('epochs', '?')} ep)")
    if not hists:
        return "no rows"
    out = ["Leave-one-patient-out golden D_f error histogram (percent bins)", ""]
    body = []
    for i in range(len(hists[0]["counts"])):
        lo = hists[0]["bin_edges"][i]
        body.append([f"{lo}", f"{lo + BIN_WIDTH}", *[str(h["counts"][i]) for h in hists]])
    out.append(_table(["bin_lo", "bin_hi", *names], body))
    out.append("")
    for n, s, h in zip(names, summaries, hists):
        ep = s.get("edge_proportion")
        ep_text = f"{ep:.3f}" if ep is not None else "n/a"
        out.append(f"{n}: {h['total']} patients, {s.get('n_failures', 0)} failed, "
                   f"edge proportion {ep_text} at threshold {s.get('threshold', EDGE_THRESHOLD)}")
    return "\n".join(out)


def cmd_report(opts) -> int:
    sweeps, chunks = [], []
    for path in opts["inputs"]:
        rows = read_report(path)
        if not rows or len(rows) == 1:
            chunks.append(f"{path}: no rows")
            continue
        kind = rows[0].get("kind")
        if kind == "sweep":
            sweeps.append((path, rows))
        elif kind == "forget":
            chunks.append(f"== {path}\n" + render_forget(rows, bool(opts["curves"])))
        else:
            raise FatalError(f"{path}: unknown report kind {kind!r}")
    if sweeps:
        chunks.append(render_sweeps(sweeps))
    print("\n\n".join(chunks))
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "forget": cmd_forget,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        opts = _coerce(resolve(args))
        return COMMANDS[args.command](opts)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FatalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    except (OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
