"""Patient-grouped datasets, forget/retain splits, a synthetic generator and JSONL I/O."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

DATASET_SCHEMA = "patientforget.dataset/1"
MANIFEST_SCHEMA = "patientforget.manifest/1"


class Hypothesis(str, Enum):
    EDGE = "Edge"
    CLUSTER = "Cluster"


class LabelSource(str, Enum):
    GROUND_TRUTH = "GroundTruth"
    GOLDEN_MODEL = "GoldenModel"


@dataclass(frozen=True)
class HypothesisLabel:
    value: Hypothesis
    source: LabelSource


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    label: int
    patient_id: str


@dataclass(frozen=True, eq=False)
class Patient:
    """All samples of one patient; a patient carries a single label."""

    patient_id: str
    label: int
    features: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] == 0:
            raise ValueError(f"patient {self.patient_id!r} has no samples")
        if not np.all(np.isfinite(f)):
            raise ValueError(f"patient {self.patient_id!r} has non-finite features")
        f = f.copy()
        f.setflags(write=False)
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "label", int(self.label))

    def __len__(self) -> int:
        return self.features.shape[0]

    def samples(self) -> Iterator[Sample]:
        for row in self.features:
            yield Sample(row, self.label, self.patient_id)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Patient):
            return NotImplemented
        return (
            self.patient_id == other.patient_id
            and self.label == other.label
            and np.array_equal(self.features, other.features)
        )


@dataclass(frozen=True, eq=False)
class DataView:
    """Stacked samples of a set of patients, in sorted patient order."""

    patients: tuple[Patient, ...]
    X: np.ndarray = field(init=False)
    y: np.ndarray = field(init=False)
    patient_ids: np.ndarray = field(init=False)

    def __post_init__(self):
        ps = tuple(sorted(self.patients, key=lambda p: p.patient_id))
        object.__setattr__(self, "patients", ps)
        if ps:
            X = np.concatenate([p.features for p in ps])
            y = np.concatenate([np.full(len(p), p.label, dtype=np.int64) for p in ps])
            pids = np.concatenate([np.full(len(p), p.patient_id, dtype=object) for p in ps])
        else:
            X, y, pids = np.zeros((0, 0)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=object)
        for a in (X, y, pids):
            a.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "patient_ids", pids)

    def __len__(self) -> int:
        return int(self.y.shape[0])

    @property
    def patient_set(self) -> frozenset[str]:
        return frozenset(p.patient_id for p in self.patients)

    def by_patient(self) -> dict[str, np.ndarray]:
        return {p.patient_id: p.features for p in self.patients}

    def samples(self) -> Iterator[Sample]:
        for p in self.patients:
            yield from p.samples()


@dataclass(frozen=True, eq=False)
class PatientDataset:
    train_patients: Mapping[str, Patient]
    test_patients: Mapping[str, Patient]
    num_classes: int
    input_dim: int

    def __post_init__(self):
        for split, ps in (("train", self.train_patients), ("test", self.test_patients)):
            for key, p in ps.items():
                if key != p.patient_id:
                    raise ValueError(f"{split} patient key {key!r} != id {p.patient_id!r}")
                if p.features.shape[1] != self.input_dim:
                    raise ValueError(f"patient {key!r}: feature dim {p.features.shape[1]} != {self.input_dim}")
                if not 0 <= p.label < self.num_classes:
                    raise ValueError(f"patient {key!r}: label {p.label} out of range")
        overlap = set(self.train_patients) & set(self.test_patients)
        if overlap:
            raise ValueError(f"patients in both train and test: {sorted(overlap)}")
        object.__setattr__(self, "train_patients", dict(sorted(self.train_patients.items())))
        object.__setattr__(self, "test_patients", dict(sorted(self.test_patients.items())))

    def train_view(self) -> DataView:
        return DataView(tuple(self.train_patients.values()))

    def test_view(self) -> DataView:
        return DataView(tuple(self.test_patients.values()))

    def __eq__(self, other) -> bool:
        if not isinstance(other, PatientDataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.input_dim == other.input_dim
            and self.train_patients == other.train_patients
            and self.test_patients == other.test_patients
        )


@dataclass(frozen=True, eq=False)
class ForgetSplit:
    forget_patient: str
    d_f: DataView
    d_r: DataView


def make_forget_split(ds: PatientDataset, patient: str) -> ForgetSplit:
    if patient in ds.test_patients:
        raise ValueError(f"{patient!r} is a test patient and cannot be forgotten")
    if patient not in ds.train_patients:
        raise KeyError(f"unknown patient {patient!r}")
    rest = tuple(p for pid, p in ds.train_patients.items() if pid != patient)
    return ForgetSplit(patient, DataView((ds.train_patients[patient],)), DataView(rest))


# --------------------------------------------------------------------------- generator


@dataclass(frozen=True)
class SynthSpec:
    """Gaussian patient populations around one centroid per class.

    Spreads are RMS radii: an offset with spread ``s`` is ``s * N(0, I) / sqrt(d)``,
    so its Euclidean length concentrates at ``s`` regardless of ``input_dim``.

    Edge patients sit at exactly ``edge_offset`` from their class centroid along
    a random direction tilted by ``edge_pull`` away from the class's mean
    displacement (rare presentations of a known class, not points between
    classes). ``test_edge_fraction`` of the test patients are edge patients
    (the training ``edge_fraction`` when left as None);
    when ``test_shares_edges`` is set each one is a relative of a training edge
    patient of the same class (same sub-population, fresh patient).
    """

    num_classes: int = 5
    input_dim: int = 32
    patients_per_class_train: int = 18
    patients_test: int = 10
    samples_per_patient: int = 16
    cluster_spread: float = 1.0
    sample_spread: float = 0.5
    edge_offset: float = 12.0
    edge_fraction: float = 0.3
    seed: int = 0
    centroid_radius: float = 4.0
    edge_pull: float = 0.5
    test_edge_fraction: float | None = None
    test_shares_edges: bool = True

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.input_dim < 2:
            raise ValueError("input_dim must be >= 2")
        if self.patients_per_class_train < 1:
            raise ValueError("need at least one training patient per class")
        if self.patients_test < 0 or self.samples_per_patient < 1:
            raise ValueError("patients_test must be >= 0 and samples_per_patient >= 1")
        if not 0.0 < self.sample_spread < self.cluster_spread < self.edge_offset:
            raise ValueError("spreads must satisfy 0 < sample_spread < cluster_spread < edge_offset")
        if self.test_edge_fraction is None:
            object.__setattr__(self, "test_edge_fraction", self.edge_fraction)
        if not 0.0 <= self.edge_fraction <= 1.0 or not 0.0 <= self.test_edge_fraction <= 1.0:
            raise ValueError("edge fractions must lie in [0, 1]")
        if not 0.0 <= self.edge_pull < 1.0:
            raise ValueError("edge_pull must lie in [0, 1)")
        if self.centroid_radius <= 0:
            raise ValueError("centroid_radius must be positive")

    @property
    def n_train(self) -> int:
        return self.num_classes * self.patients_per_class_train

    def n_edge(self, n: int | None = None, fraction: float | None = None) -> int:
        """Floor of ``fraction * n``, but at least one edge patient when the fraction is positive."""
        n = self.n_train if n is None else n
        fraction = self.edge_fraction if fraction is None else fraction
        if fraction <= 0 or n == 0:
            return 0
        return min(n, max(1, math.floor(fraction * n)))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PatientTruth:
    hypothesis: Hypothesis
    label: int
    split: str
    distance_to_centroid: float
    relative_of: str | None = None


@dataclass(frozen=True, eq=False)
class GeneratedData:
    dataset: PatientDataset
    truth: dict[str, PatientTruth]
    centroids: np.ndarray
    spec: SynthSpec

    def ground_truth(self, patient_id: str) -> HypothesisLabel:
        return HypothesisLabel(self.truth[patient_id].hypothesis, LabelSource.GROUND_TRUTH)

    def train_ids(self, hypothesis: Hypothesis) -> list[str]:
        return [
            pid
            for pid, t in sorted(self.truth.items())
            if t.split == "train" and t.hypothesis is hypothesis
        ]

    def manifest(self) -> dict:
        return {
            "schema": MANIFEST_SCHEMA,
            "spec": self.spec.to_dict(),
            "patients": {
                pid: {
                    "hypothesis": t.hypothesis.value,
                    "label": t.label,
                    "split": t.split,
                    "distance_to_centroid": t.distance_to_centroid,
                    "relative_of": t.relative_of,
                }
                for pid, t in sorted(self.truth.items())
            },
        }


def generate(spec: SynthSpec) -> GeneratedData:
    rng = np.random.default_rng(spec.seed)
    C, d = spec.num_classes, spec.input_dim
    root_d = math.sqrt(d)

    centroids = rng.normal(size=(C, d))
    centroids *= spec.centroid_radius / np.linalg.norm(centroids, axis=1, keepdims=True)
    overall = centroids.mean(axis=0)

    def edge_mean(c: int) -> np.ndarray:
        away = centroids[c] - overall
        norm = np.linalg.norm(away)
        r = rng.normal(size=d)
        if norm > 0:
            away = away / norm
            r -= (r @ away) * away
            r /= np.linalg.norm(r)
            u = math.sqrt(1.0 - spec.edge_pull**2) * r - spec.edge_pull * away
        else:
            u = r / np.linalg.norm(r)
        return centroids[c] + spec.edge_offset * u

    def cluster_mean(c: int) -> np.ndarray:
        return centroids[c] + spec.cluster_spread * rng.normal(size=d) / root_d

    def draw(mean: np.ndarray) -> np.ndarray:
        return mean + spec.sample_spread * rng.normal(size=(spec.samples_per_patient, d)) / root_d

    n = spec.n_train
    edge_idx = set(rng.permutation(n)[: spec.n_edge()].tolist())
    train: dict[str, Patient] = {}
    truth: dict[str, PatientTruth] = {}
    means: dict[str, np.ndarray] = {}
    width = max(3, len(str(n - 1)))
    for i in range(n):
        c = i // spec.patients_per_class_train
        pid = f"p{i:0{width}d}"
        edge = i in edge_idx
        m = edge_mean(c) if edge else cluster_mean(c)
        means[pid] = m
        train[pid] = Patient(pid, c, draw(m))
        truth[pid] = PatientTruth(
            Hypothesis.EDGE if edge else Hypothesis.CLUSTER, c, "train",
            float(np.linalg.norm(m - centroids[c])),
        )

    n_test_edge = spec.n_edge(spec.patients_test, spec.test_edge_fraction)
    test_edge_idx = set(rng.permutation(spec.patients_test)[:n_test_edge].tolist())
    test: dict[str, Patient] = {}
    used: set[str] = set()
    twidth = max(3, len(str(max(spec.patients_test - 1, 0))))
    for k in range(spec.patients_test):
        c = k % C
        pid = f"t{k:0{twidth}d}"
        relative = None
        if k in test_edge_idx:
            hyp = Hypothesis.EDGE
            candidates = [
                q for q, t in truth.items()
                if t.split == "train" and t.label == c and t.hypothesis is Hypothesis.EDGE and q not in used
            ]
            if spec.test_shares_edges and candidates:
                relative = candidates[int(rng.integers(len(candidates)))]
                used.add(relative)
                m = means[relative] + spec.cluster_spread * rng.normal(size=d) / root_d
            else:
                m = edge_mean(c)
        else:
            hyp = Hypothesis.CLUSTER
            m = cluster_mean(c)
        test[pid] = Patient(pid, c, draw(m))
        truth[pid] = PatientTruth(hyp, c, "test", float(np.linalg.norm(m - centroids[c])), relative)

    ds = PatientDataset(train, test, C, d)
    return GeneratedData(ds, truth, centroids, spec)


# --------------------------------------------------------------------------- file I/O


class DatasetFormatError(ValueError):
    pass


def _records(ds: PatientDataset) -> Iterator[dict]:
    for split, patients in (("train", ds.train_patients), ("test", ds.test_patients)):
        yield {
            "schema": DATASET_SCHEMA,
            "num_classes": ds.num_classes,
            "input_dim": ds.input_dim,
            "split": split,
        }
        for p in patients.values():
            for row in p.features:
                yield {"patient_id": p.patient_id, "label": p.label, "features": [float(v) for v in row]}


def save(ds: PatientDataset, path, format: str = "jsonl") -> None:
    """Write the dataset as JSON lines: a header per split followed by one record per sample."""
    if format != "jsonl":
        raise ValueError(f"unsupported dataset format {format!r}")
    with open(path, "w") as fh:
        for rec in _records(ds):
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load(path, format: str = "jsonl") -> PatientDataset:
    if format != "jsonl":
        raise ValueError(f"unsupported dataset format {format!r}")
    with open(path) as fh:
        return parse_records(fh, source=str(path))


def parse_records(lines: Iterable[str], source: str = "<input>") -> PatientDataset:
    header: dict | None = None
    split: str | None = None
    rows: dict[str, dict[str, list]] = {"train": {}, "test": {}}
    labels: dict[str, tuple[int, str]] = {}

    def fail(idx: int, msg: str):
        raise DatasetFormatError(f"{source}: record {idx}: {msg}")

    idx = -1
    for idx, line in enumerate(lines):
        if not line.strip():
            fail(idx, "blank line")
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            fail(idx, f"invalid JSON ({exc.msg})")
        if not isinstance(rec, dict):
            fail(idx, "record is not an object")
        if "split" in rec:
            if rec.get("schema") != DATASET_SCHEMA:
                fail(idx, f"unsupported schema {rec.get('schema')!r}")
            if rec["split"] not in ("train", "test"):
                fail(idx, f"unknown split {rec['split']!r}")
            for key in ("num_classes", "input_dim"):
                if not isinstance(rec.get(key), int) or rec[key] < 1:
                    fail(idx, f"header field {key!r} must be a positive integer")
            if header is not None and (rec["num_classes"], rec["input_dim"]) != (
                header["num_classes"], header["input_dim"]
            ):
                fail(idx, "headers disagree on num_classes/input_dim")
            header, split = rec, rec["split"]
            continue
        if header is None:
            fail(idx, "sample record before any header")
        pid, label, feats = rec.get("patient_id"), rec.get("label"), rec.get("features")
        if not isinstance(pid, str) or not pid:
            fail(idx, "patient_id must be a non-empty string")
        if not isinstance(label, int) or isinstance(label, bool):
            fail(idx, "label must be an integer")
        if not 0 <= label < header["num_classes"]:
            fail(idx, f"label {label} outside [0, {header['num_classes']})")
        if not isinstance(feats, list) or not feats:
            fail(idx, f"patient {pid!r}: empty or missing features")
        if len(feats) != header["input_dim"]:
            fail(idx, f"expected {header['input_dim']} features, got {len(feats)}")
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in feats):
            fail(idx, "features must be numbers")
        if not all(math.isfinite(v) for v in feats):
            fail(idx, "features must be finite")
        if pid in labels:
            prev_label, prev_split = labels[pid]
            if prev_split != split:
                fail(idx, f"patient {pid!r} appears in both train and test")
            if prev_label != label:
                fail(idx, f"patient {pid!r} has mixed labels {prev_label} and {label}")
        labels[pid] = (label, split)
        rows[split].setdefault(pid, []).append(feats)

    if header is None:
        raise DatasetFormatError(f"{source}: no header record")

    def build(split: str) -> dict[str, Patient]:
        return {
            pid: Patient(pid, labels[pid][0], np.array(feats, dtype=np.float64))
            for pid, feats in rows[split].items()
        }

    return PatientDataset(build("train"), build("test"), header["num_classes"], header["input_dim"])


def save_manifest(gen: GeneratedData, path) -> None:
    Path(path).write_text(json.dumps(gen.manifest(), indent=1, sort_keys=True) + "\n")


def load_manifest(path) -> dict[str, HypothesisLabel]:
    payload = json.loads(Path(path).read_text())
    if payload.get("schema") != MANIFEST_SCHEMA:
        raise ValueError(f"{path}: unsupported manifest schema {payload.get('schema')!r}")
    return {
        pid: HypothesisLabel(Hypothesis(entry["hypothesis"]), LabelSource.GROUND_TRUTH)
        for pid, entry in payload["patients"].items()
    }


def dataset_digest(ds: PatientDataset) -> str:
    """SHA-256 over the full dataset content, independent of file formatting."""
    h = hashlib.sha256(f"{ds.num_classes}:{ds.input_dim}".encode())
    for split, patients in (("train", ds.train_patients), ("test", ds.test_patients)):
        for pid, p in patients.items():
            h.update(f"|{split}|{pid}|{p.label}|".encode())
            h.update(np.ascontiguousarray(p.features, dtype="<f8").tobytes())
    return h.hexdigest()
