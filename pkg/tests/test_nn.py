from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patientforget.nn import (
    EvalResult,
    ModelArch,
    TrainConfig,
    TrainingDiverged,
    WeightVector,
    evaluate,
    forward,
    init_weights,
    load_checkpoint,
    loss_and_grad,
    predict_proba,
    save_checkpoint,
    train,
)


def central_fd(w: WeightVector, X, y, h=1e-4):
    g = np.zeros(len(w))
    for i in range(len(w)):
        up = w.values.copy()
        dn = w.values.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (loss_and_grad(w.with_values(up), X, y)[0] - loss_and_grad(w.with_values(dn), X, y)[0]) / (2 * h)
    return g


def random_model(rng, max_params=200):
    while True:
        d = int(rng.integers(1, 6))
        hidden = [int(h) for h in rng.integers(1, 8, size=int(rng.integers(0, 3)))]
        arch = ModelArch(d, tuple(hidden), int(rng.integers(2, 6)), str(rng.choice(["relu", "tanh"])))
        if arch.n_params <= max_params:
            return arch


# --- architecture and init -------------------------------------------------


def test_param_count_example():
    arch = ModelArch(2, (3,), 5)
    w = init_weights(arch, 1)
    assert arch.n_params == 29
    assert len(w) == 29


def test_softmax_regression_param_count():
    arch = ModelArch(7, (), 5)
    assert len(init_weights(arch, 3)) == (7 + 1) * 5


@pytest.mark.parametrize(
    "kwargs",
    [dict(input_dim=0), dict(input_dim=2, num_classes=1), dict(input_dim=2, hidden_sizes=(0,)),
     dict(input_dim=2, activation="sigmoid")],
)
def test_arch_validation(kwargs):
    with pytest.raises(ValueError):
        ModelArch(**kwargs)


def test_init_deterministic_and_finite():
    arch = ModelArch(4, (6, 3))
    a, b = init_weights(arch, 7), init_weights(arch, 7)
    assert a.values.tobytes() == b.values.tobytes()
    assert a.is_finite()
    assert not np.array_equal(a.values, init_weights(arch, 8).values)


def test_init_fan_in_bound():
    arch = ModelArch(10, (20,), 5)
    (W1, b1), (W2, b2) = init_weights(arch, 0).layers()
    assert np.all(np.abs(W1) <= math.sqrt(6 / 10))
    assert np.all(np.abs(W2) <= math.sqrt(3 / 20))
    assert not b1.any() and not b2.any()


def test_weight_vector_length_checked():
    with pytest.raises(ValueError):
        WeightVector(np.zeros(5), ModelArch(2, (3,)))


def test_layer_layout_is_w_then_b():
    arch = ModelArch(2, (3,), 5)
    w = WeightVector(np.arange(29.0), arch)
    (W1, b1), (W2, b2) = w.layers()
    assert W1.shape == (3, 2) and W1[0, 1] == 1.0
    assert list(b1) == [6.0, 7.0, 8.0]
    assert W2.shape == (5, 3) and W2[0, 0] == 9.0
    assert list(b2) == [24.0, 25.0, 26.0, 27.0, 28.0]


# --- forward -----------------------------------------------------------------


def test_zero_weights_uniform():
    arch = ModelArch(3, (4,), 5)
    p = forward(WeightVector(np.zeros(arch.n_params), arch), [1.0, -2.0, 0.5])
    np.testing.assert_array_equal(p, np.full(5, 0.2))


def test_forward_matches_hand_computation():
    # 2 inputs -> 2 relu units -> 3 classes, evaluated by hand
    arch = ModelArch(2, (2,), 3)
    W1 = np.array([[1.0, -1.0], [0.5, 2.0]])
    b1 = np.array([0.0, -1.0])
    W2 = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 1.0]])
    b2 = np.array([0.1, 0.0, -0.1])
    w = WeightVector(np.concatenate([W1.ravel(), b1, W2.ravel(), b2]), arch)
    x = np.array([2.0, 1.0])
    # hidden pre-activation: (2-1, 1+2-1) = (1, 2); relu keeps both
    logits = np.array([1.0 + 0.1, 2.0, -1.0 + 2.0 - 0.1])
    expected = np.exp(logits) / np.exp(logits).sum()
    np.testing.assert_allclose(forward(w, x), expected, rtol=1e-14)


def test_forward_dimension_mismatch():
    arch = ModelArch(3, (), 5)
    with pytest.raises(ValueError):
        forward(init_weights(arch, 0), [1.0, 2.0])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), scale=st.floats(0.01, 50.0))
def test_softmax_normalized_and_positive(seed, scale):
    rng = np.random.default_rng(seed)
    arch = ModelArch(4, (5,), 5)
    w = WeightVector(rng.normal(scale=scale, size=arch.n_params), arch)
    P = predict_proba(w, rng.normal(size=(8, 4)))
    assert np.all(P > 0)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)


# --- loss and gradient ---------------------------------------------------------


def test_uniform_loss_is_log_k():
    arch = ModelArch(3, (4,), 5)
    w = WeightVector(np.zeros(arch.n_params), arch)
    loss, _ = loss_and_grad(w, np.ones((6, 3)), np.arange(6) % 5)
    assert loss == pytest.approx(math.log(5), abs=1e-15)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(5):
        arch = random_model(rng)
        w = WeightVector(rng.normal(scale=0.7, size=arch.n_params), arch)
        X = rng.normal(size=(7, arch.input_dim))
        y = rng.integers(0, arch.num_classes, size=7)
        _, g = loss_and_grad(w, X, y)
        fd = central_fd(w, X, y)
        np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-8)


def test_duplicated_batch_same_loss_and_grad():
    rng = np.random.default_rng(1)
    arch = ModelArch(3, (4,), 5)
    w = init_weights(arch, 2)
    X = rng.normal(size=(5, 3))
    y = rng.integers(0, 5, size=5)
    l1, g1 = loss_and_grad(w, X, y)
    l2, g2 = loss_and_grad(w, np.repeat(X, 2, axis=0), np.repeat(y, 2))
    assert l1 == pytest.approx(l2, rel=1e-14)
    np.testing.assert_allclose(g1, g2, rtol=1e-12, atol=1e-16)


def test_loss_errors():
    arch = ModelArch(3, (), 5)
    w = init_weights(arch, 0)
    with pytest.raises(ValueError):
        loss_and_grad(w, np.zeros((0, 3)), np.zeros(0, dtype=int))
    with pytest.raises(ValueError):
        loss_and_grad(w, np.zeros((1, 3)), np.array([5]))
    with pytest.raises(ValueError):
        loss_and_grad(w, np.zeros((1, 3)), np.array([-1]))


# --- training ------------------------------------------------------------------


def test_epochs_zero_returns_init():
    arch = ModelArch(2, (3,))
    init = init_weights(arch, 0)
    out = train(np.ones((4, 2)), np.zeros(4, dtype=int), TrainConfig(epochs=0), init)
    assert out is init


def test_training_is_bitwise_deterministic():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(50, 4))
    y = rng.integers(0, 5, size=50)
    arch = ModelArch(4, (8,))
    cfg = TrainConfig(learning_rate=1e-2, epochs=3, batch_size=7, seed=11)
    a = train(X, y, cfg, init_weights(arch, 1))
    b = train(X, y, cfg, init_weights(arch, 1))
    assert a.values.tobytes() == b.values.tobytes()
    c = train(X, y, cfg.replace(seed=12), init_weights(arch, 1))
    assert not np.array_equal(a.values, c.values)


def perceptron_separates(X, y, max_epochs=1000) -> bool:
    """Classic perceptron on {-1,+1} labels; converges iff the data is linearly separable."""
    Xa = np.hstack([X, np.ones((len(X), 1))])
    s = np.where(y == 1, 1.0, -1.0)
    v = np.zeros(Xa.shape[1])
    for _ in range(max_epochs):
        mistakes = 0
        for xi, si in zip(Xa, s):
            if si * (xi @ v) <= 0:
                v += si * xi
                mistakes += 1
        if mistakes == 0:
            return True
    return False


def test_separable_two_class_problem_is_learned():
    rng = np.random.default_rng(4)
    y = (np.arange(200) < 100).astype(int)
    X = rng.normal(size=(200, 2))
    X[:, 0] = np.where(y == 1, 1.0, -1.0) * (0.5 + np.abs(X[:, 0]))
    assert perceptron_separates(X, y)
    arch = ModelArch(2, (8,), num_classes=2)
    w = train(X, y, TrainConfig(learning_rate=1e-2, epochs=30, seed=0), init_weights(arch, 0))
    assert evaluate(w, X, y).error <= 0.05


def test_divergence_is_reported():
    arch = ModelArch(2, (4,))
    X = np.random.default_rng(0).normal(size=(8, 2))
    with pytest.raises(TrainingDiverged):
        train(X, np.zeros(8, dtype=int), TrainConfig(learning_rate=1e300, epochs=3), init_weights(arch, 0))


def test_train_config_validation():
    for bad in (dict(learning_rate=0.0), dict(adam_beta1=1.0), dict(adam_beta2=-0.1), dict(epochs=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.epochs, cfg.adam_beta1, cfg.adam_beta2) == (1e-4, 13, 0.5, 0.999)


# --- evaluation ----------------------------------------------------------------


def perfect_model():
    # softmax regression whose logits are the first two inputs
    arch = ModelArch(2, (), 2)
    return WeightVector(np.array([10.0, 0.0, 0.0, 10.0, 0.0, 0.0]), arch)


def test_perfect_model_zero_error():
    X = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 0.5]])
    y = np.array([0, 1, 0])
    res = evaluate(perfect_model(), X, y, ["a", "b", "a"])
    assert res.error == 0.0
    assert res.per_patient_error == {"a": 0.0, "b": 0.0}


def test_eval_error_identity_and_weighted_mean():
    rng = np.random.default_rng(5)
    arch = ModelArch(3, (4,), 5)
    w = init_weights(arch, 9)
    X = rng.normal(size=(40, 3))
    y = rng.integers(0, 5, size=40)
    pids = [f"p{i % 3}" for i in range(40)]
    res = evaluate(w, X, y, pids)
    assert isinstance(res, EvalResult)
    assert res.error == 1 - res.n_correct / res.n_samples
    counts = {p: pids.count(p) for p in res.per_patient_error}
    weighted = sum(res.per_patient_error[p] * counts[p] for p in counts) / 40
    assert weighted == pytest.approx(res.error, abs=1e-12)
    perm = rng.permutation(40)
    assert evaluate(w, X[perm], y[perm]).error == res.error


def test_random_uniform_classifier_error_near_chance():
    rng = np.random.default_rng(6)
    arch = ModelArch(8, (), 5)
    w = WeightVector(rng.normal(scale=3.0, size=arch.n_params), arch)
    X = rng.normal(size=(1000, 8))
    y = np.repeat(np.arange(5), 200)
    rng.shuffle(y)
    # labels independent of inputs, so the expected error is 1 - 1/5
    assert abs(evaluate(w, X, y).error - 0.8) <= 0.03


def test_evaluate_empty_view():
    with pytest.raises(ValueError):
        evaluate(perfect_model(), np.zeros((0, 2)), np.zeros(0, dtype=int))


# --- checkpoints -----------------------------------------------------------------


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    arch = ModelArch(3, (5, 4), 5, "tanh")
    w = WeightVector(np.random.default_rng(0).normal(size=arch.n_params) * 1e-3, arch)
    cfg = TrainConfig(learning_rate=3e-4, seed=99)
    path = tmp_path / "m.json"
    save_checkpoint(path, w, cfg, {"note": "x"})
    w2, cfg2, extra = load_checkpoint(path)
    assert w2.values.tobytes() == w.values.tobytes()
    assert w2.arch == arch and cfg2 == cfg and extra == {"note": "x"}


def test_checkpoint_schema_checked(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"schema": "other/9"}')
    with pytest.raises(ValueError):
        load_checkpoint(path)
