"""Minimal multilayer-perceptron classifier on a flat parameter vector.

Parameters are stored layer by layer as ``W`` (shape ``(out, in)``, row-major)
followed by ``b`` (shape ``(out,)``). Everything else in the package treats the
model as that flat vector, so perturbation operators never need to know about
layers.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .seeds import counter_rng

PROB_FLOOR = 1e-12
ADAM_EPS = 1e-8
# Uniform init limit is sqrt(gain / fan_in); 6 is He-uniform for ReLU layers,
# 3 is LeCun-uniform for tanh layers and the softmax layer.
INIT_GAIN = {"relu": 6.0, "tanh": 3.0, "output": 3.0}

CHECKPOINT_SCHEMA = "patientforget.checkpoint/1"


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass(frozen=True)
class ModelArch:
    input_dim: int
    hidden_sizes: tuple[int, ...] = ()
    num_classes: int = 5
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if any(h < 1 for h in self.hidden_sizes):
            raise ValueError("hidden sizes must be >= 1")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_sizes, self.num_classes]

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = self.layer_dims
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)

    def fingerprint(self) -> str:
        hidden = "x".join(str(h) for h in self.hidden_sizes) or "none"
        return f"mlp-{self.input_dim}-{hidden}-{self.num_classes}-{self.activation}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelArch":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_sizes=tuple(d.get("hidden_sizes", ())),
            num_classes=int(d.get("num_classes", 5)),
            activation=d.get("activation", "relu"),
        )


@dataclass(frozen=True, eq=False)
class WeightVector:
    values: np.ndarray
    arch: ModelArch

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.shape[0] != self.arch.n_params:
            raise ValueError(
                f"weight vector has length {v.size}, arch {self.arch.fingerprint()} "
                f"needs {self.arch.n_params}"
            )
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.shape[0]

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Return ``(W, b)`` views into the flat vector, input layer first."""
        return list(_split_layers(self.values, self.arch))

    def with_values(self, values: np.ndarray) -> "WeightVector":
        return WeightVector(values, self.arch)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def digest(self) -> str:
        h = hashlib.sha256(self.arch.fingerprint().encode())
        h.update(np.ascontiguousarray(self.values, dtype="<f8").tobytes())
        return h.hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, WeightVector):
            return NotImplemented
        return self.arch == other.arch and np.array_equal(self.values, other.values)


def _split_layers(values: np.ndarray, arch: ModelArch) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    off = 0
    for out_dim, in_dim in arch.layer_shapes:
        W = values[off : off + out_dim * in_dim].reshape(out_dim, in_dim)
        off += out_dim * in_dim
        b = values[off : off + out_dim]
        off += out_dim
        yield W, b


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 13
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})


@dataclass(frozen=True)
class EvalResult:
    error: float
    per_patient_error: dict[str, float] = field(default_factory=dict)
    n_samples: int = 0
    n_correct: int = 0


def init_weights(arch: ModelArch, seed: int) -> WeightVector:
    """Fan-in scaled uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    parts = []
    shapes = arch.layer_shapes
    for i, (out_dim, in_dim) in enumerate(shapes):
        gain = INIT_GAIN["output"] if i == len(shapes) - 1 else INIT_GAIN[arch.activation]
        limit = math.sqrt(gain / in_dim)
        parts.append(rng.uniform(-limit, limit, size=out_dim * in_dim))
        parts.append(np.zeros(out_dim))
    return WeightVector(np.concatenate(parts), arch)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_grad(h: np.ndarray, activation: str) -> np.ndarray:
    # expressed through the post-activation value h
    if activation == "relu":
        return (h > 0).astype(h.dtype)
    return 1.0 - h * h


def _as_batch(X, arch: ModelArch) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != arch.input_dim:
        raise ValueError(f"expected inputs of dimension {arch.input_dim}, got shape {X.shape}")
    return X


def forward_activations(w: WeightVector, X: np.ndarray) -> list[np.ndarray]:
    """Inputs, hidden activations and logits for a batch, in layer order."""
    acts = [X]
    h = X
    layers = w.layers()
    for i, (W, b) in enumerate(layers):
        z = h @ W.T + b
        h = _activate(z, w.arch.activation) if i < len(layers) - 1 else z
        acts.append(h)
    return acts


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.maximum(np.exp(log_softmax(z)), PROB_FLOOR)


def predict_proba(w: WeightVector, X) -> np.ndarray:
    X = _as_batch(X, w.arch)
    return softmax(forward_activations(w, X)[-1])


def forward(w: WeightVector, x) -> np.ndarray:
    """Class probabilities for a single feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("forward takes a single feature vector; use predict_proba for batches")
    return predict_proba(w, x)[0]


def backprop(w: WeightVector, acts: Sequence[np.ndarray], dlogits: np.ndarray) -> list[np.ndarray]:
    """Per-layer deltas (gradient w.r.t. each layer's pre-activation).

    ``dlogits`` has shape ``(n, num_classes)``. The returned list is aligned
    with ``w.layers()``; the weight gradient of layer ``i`` for sample ``s`` is
    ``outer(deltas[i][s], acts[i][s])``.
    """
    layers = w.layers()
    deltas: list[np.ndarray] = [None] * len(layers)  # type: ignore[list-item]
    g = dlogits
    for i in range(len(layers) - 1, -1, -1):
        deltas[i] = g
        if i > 0:
            W, _ = layers[i]
            g = (g @ W) * _activation_grad(acts[i], w.arch.activation)
    return deltas


def _flat_grad(deltas: Sequence[np.ndarray], acts: Sequence[np.ndarray]) -> np.ndarray:
    parts = []
    for i, d in enumerate(deltas):
        parts.append((d.T @ acts[i]).ravel())
        parts.append(d.sum(axis=0))
    return np.concatenate(parts)


def _check_labels(y: np.ndarray, arch: ModelArch, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integers")
        y = y.astype(np.int64)
    if n and (y.min() < 0 or y.max() >= arch.num_classes):
        raise ValueError(f"labels must lie in [0, {arch.num_classes})")
    return y


def loss_and_grad(w: WeightVector, X, y) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the flat weights."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("empty batch")
    X = _as_batch(X, w.arch)
    n = X.shape[0]
    y = _check_labels(y, w.arch, n)
    acts = forward_activations(w, X)
    logp = log_softmax(acts[-1])
    logp_y = logp[np.arange(n), y]
    floor = math.log(PROB_FLOOR)
    clamped = logp_y < floor
    loss = float(-np.mean(np.maximum(logp_y, floor)))
    G = np.exp(logp)
    G[np.arange(n), y] -= 1.0
    G[clamped] = 0.0
    G /= n
    grad = _flat_grad(backprop(w, acts, G), acts)
    return loss, grad


class _Adam:
    def __init__(self, n: int, lr: float, beta1: float, beta2: float):
        self.lr, self.beta1, self.beta2 = lr, beta1, beta2
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def train(X, y, cfg: TrainConfig, init: WeightVector) -> WeightVector:
    """Mini-batch Adam on mean cross-entropy.

    Each epoch visits the samples in a permutation drawn from a counter-based
    generator keyed by ``(cfg.seed, epoch)``, so a run is bitwise reproducible.
    """
    X = _as_batch(X, init.arch)
    n = X.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty view")
    y = _check_labels(y, init.arch, n)
    if cfg.epochs == 0:
        return init
    params = init.values.copy()
    opt = _Adam(params.size, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2)
    for epoch in range(cfg.epochs):
        order = counter_rng(cfg.seed, epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grad = loss_and_grad(WeightVector(params, init.arch), X[idx], y[idx])
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {opt.t}")
            opt.step(params, grad)
        if not np.all(np.isfinite(params)):
            raise TrainingDiverged(f"non-finite weights after epoch {epoch}")
    return WeightVector(params, init.arch)


def predict(w: WeightVector, X) -> np.ndarray:
    X = _as_batch(X, w.arch)
    return np.argmax(forward_activations(w, X)[-1], axis=1)


def evaluate(w: WeightVector, X, y, patient_ids: Sequence[str] | None = None) -> EvalResult:
    """Argmax error rate, overall and per patient."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("cannot evaluate an empty view")
    n = X.shape[0]
    y = _check_labels(y, w.arch, n)
    correct = predict(w, X) == y
    n_correct = int(correct.sum())
    per_patient: dict[str, float] = {}
    if patient_ids is not None:
        pids = np.asarray(patient_ids)
        for pid in sorted(set(pids.tolist())):
            mask = pids == pid
            per_patient[pid] = 1.0 - float(correct[mask].sum()) / float(mask.sum())
    return EvalResult(
        error=1.0 - n_correct / n,
        per_patient_error=per_patient,
        n_samples=n,
        n_correct=n_correct,
    )


def save_checkpoint(path, w: WeightVector, cfg: TrainConfig | None = None, extra: Mapping | None = None) -> None:
    # json writes floats with repr(), which round-trips doubles exactly
    payload = {
        "schema": CHECKPOINT_SCHEMA,
        "arch": w.arch.to_dict(),
        "train_config": asdict(cfg) if cfg is not None else None,
        "seed": cfg.seed if cfg is not None else None,
        "extra": dict(extra or {}),
        "weights": [float(v) for v in w.values],
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def load_checkpoint(path) -> tuple[WeightVector, TrainConfig | None, dict]:
    payload = json.loads(Path(path).read_text())
    if payload.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"{path}: unsupported checkpoint schema {payload.get('schema')!r}")
    arch = ModelArch.from_dict(payload["arch"])
    w = WeightVector(np.array(payload["weights"], dtype=np.float64), arch)
    cfg = TrainConfig(**payload["train_config"]) if payload.get("train_config") else None
    return w, cfg, payload.get("extra", {})
