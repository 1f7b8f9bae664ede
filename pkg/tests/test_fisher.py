from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patientforget.fisher import (
    FimDiagonal,
    FimSource,
    fim_diag_patient,
    fim_diag_sample,
    fim_diag_set,
    load_fim,
    save_fim,
)
from patientforget.nn import ModelArch, TrainConfig, WeightVector, init_weights, loss_and_grad, predict_proba, train


def brute_force_fim(w: WeightVector, x) -> np.ndarray:
    """Full matrix E_y[g g^T] from per-class gradients, returned as its diagonal."""
    x = np.asarray(x, dtype=float)[None, :]
    p = predict_proba(w, x)[0]
    F = np.zeros((len(w), len(w)))
    for k in range(w.arch.num_classes):
        _, neg_g = loss_and_grad(w, x, np.array([k]))
        F += p[k] * np.outer(neg_g, neg_g)
    return np.diag(F)


def fd_log_prob_grad(w: WeightVector, x, k, h=1e-6) -> np.ndarray:
    g = np.zeros(len(w))
    for i in range(len(w)):
        up, dn = w.values.copy(), w.values.copy()
        up[i] += h
        dn[i] -= h
        lp = np.log(predict_proba(w.with_values(up), x[None, :])[0, k])
        lm = np.log(predict_proba(w.with_values(dn), x[None, :])[0, k])
        g[i] = (lp - lm) / (2 * h)
    return g


def small_model(rng, max_params=30):
    while True:
        arch = ModelArch(
            int(rng.integers(1, 4)),
            tuple(int(h) for h in rng.integers(1, 4, size=int(rng.integers(0, 2)))),
            int(rng.integers(2, 4)),
            str(rng.choice(["relu", "tanh"])),
        )
        if arch.n_params <= max_params:
            return arch, WeightVector(rng.normal(size=arch.n_params), arch)


# --- per-sample --------------------------------------------------------------------


def test_matches_brute_force_outer_product():
    rng = np.random.default_rng(0)
    for _ in range(20):
        _, w = small_model(rng)
        x = rng.normal(size=w.arch.input_dim)
        np.testing.assert_allclose(fim_diag_sample(w, x), brute_force_fim(w, x), rtol=0, atol=1e-8)


def test_matches_finite_difference_gradients():
    rng = np.random.default_rng(1)
    arch = ModelArch(2, (3,), 3, "tanh")
    w = WeightVector(rng.normal(size=arch.n_params), arch)
    x = rng.normal(size=2)
    p = predict_proba(w, x[None, :])[0]
    expected = sum(p[k] * fd_log_prob_grad(w, x, k) ** 2 for k in range(3))
    np.testing.assert_allclose(fim_diag_sample(w, x), expected, atol=1e-8)


def test_logistic_closed_form():
    # one input, two classes, no hidden layer: d log p_k / dz_j = [j == k] - p_j,
    # so every entry is p0 * p1 times x**2 (weights) or 1 (biases)
    arch = ModelArch(1, (), 2)
    w = WeightVector(np.array([0.7, -0.4, 0.1, 0.3]), arch)
    x = 1.5
    z = np.array([0.7 * x + 0.1, -0.4 * x + 0.3])
    p = np.exp(z) / np.exp(z).sum()
    oracle = np.zeros(4)
    for k in range(2):
        g = (np.eye(2)[k] - p)
        oracle += p[k] * np.concatenate([g * x, g]) ** 2
    np.testing.assert_allclose(fim_diag_sample(w, [x]), oracle, atol=1e-12)
    np.testing.assert_allclose(oracle, p[0] * p[1] * np.array([x * x, x * x, 1, 1]), atol=1e-15)


def test_saturated_model_has_vanishing_fim():
    arch = ModelArch(1, (), 3)
    w = WeightVector(np.array([0.0, 0.0, 0.0, 60.0, 0.0, 0.0]), arch)
    assert np.all(fim_diag_sample(w, [1.0]) < 1e-20)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), scale=st.floats(0.01, 30.0))
def test_entries_nonnegative_and_finite(seed, scale):
    rng = np.random.default_rng(seed)
    arch = ModelArch(3, (4,), 5)
    w = WeightVector(rng.normal(scale=scale, size=arch.n_params), arch)
    v = fim_diag_sample(w, rng.normal(scale=scale, size=3))
    assert np.all(v >= 0) and np.all(np.isfinite(v))


def test_sample_dimension_checked():
    w = init_weights(ModelArch(3, ()), 0)
    with pytest.raises(ValueError):
        fim_diag_sample(w, [1.0, 2.0])


def test_sampled_expectation_is_unbiased():
    rng = np.random.default_rng(2)
    arch = ModelArch(2, (3,), 3)
    w = WeightVector(rng.normal(size=arch.n_params), arch)
    X = np.repeat(rng.normal(size=(1, 2)), 4000, axis=0)
    exact = fim_diag_patient(w, X[:1]).values
    mc = fim_diag_patient(w, X, expectation="sampled", seed=5).values
    np.testing.assert_allclose(mc, exact, rtol=0.1, atol=1e-3 * exact.max())


# --- per-patient and per-set ------------------------------------------------------------


def test_single_sample_patient_equals_sample():
    rng = np.random.default_rng(3)
    w = init_weights(ModelArch(4, (5,)), 1)
    x = rng.normal(size=4)
    f = fim_diag_patient(w, x[None, :])
    assert f.source is FimSource.SINGLE_PATIENT
    np.testing.assert_array_equal(f.values, fim_diag_sample(w, x))


def test_duplicated_sample_equals_single():
    w = init_weights(ModelArch(4, (5,)), 1)
    x = np.random.default_rng(4).normal(size=(1, 4))
    np.testing.assert_array_equal(fim_diag_patient(w, np.repeat(x, 7, axis=0)).values, fim_diag_patient(w, x).values)


def test_two_sample_patient_is_mean():
    rng = np.random.default_rng(5)
    w = init_weights(ModelArch(4, (5,)), 1)
    X = rng.normal(size=(2, 4))
    expected = (brute_force_fim(w, X[0]) + brute_force_fim(w, X[1])) / 2
    np.testing.assert_allclose(fim_diag_patient(w, X).values, expected, atol=1e-12)


def test_empty_patient_and_empty_set_rejected():
    w = init_weights(ModelArch(4, ()), 0)
    with pytest.raises(ValueError):
        fim_diag_patient(w, np.zeros((0, 4)))
    with pytest.raises(ValueError):
        fim_diag_set(w, {})


def test_set_of_one_and_of_identical_patients():
    rng = np.random.default_rng(6)
    w = init_weights(ModelArch(3, (4,)), 2)
    X = rng.normal(size=(5, 3))
    one = fim_diag_patient(w, X).values
    np.testing.assert_array_equal(fim_diag_set(w, {"a": X}).values, one)
    pair = fim_diag_set(w, {"a": X, "b": X.copy()})
    assert pair.n_patients == 2
    np.testing.assert_allclose(pair.values, one, rtol=1e-15)


def patient_sets(draw_seed):
    rng = np.random.default_rng(draw_seed)
    n = int(rng.integers(1, 6))
    return {f"p{i}": rng.normal(size=(int(rng.integers(1, 5)), 3)) for i in range(n)}


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), perm_seed=st.integers(0, 100))
def test_patient_permutation_invariance(seed, perm_seed):
    w = init_weights(ModelArch(3, (4,)), seed % 7)
    pats = patient_sets(seed)
    keys = list(pats)
    np.random.default_rng(perm_seed).shuffle(keys)
    shuffled = {k: pats[k] for k in keys}
    assert fim_diag_set(w, pats) == fim_diag_set(w, shuffled)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), reps=st.integers(2, 4))
def test_replication_invariance_is_exact(seed, reps):
    w = init_weights(ModelArch(3, (4,)), seed % 5)
    pats = patient_sets(seed)
    replicated = {k: np.repeat(v, reps, axis=0) for k, v in pats.items()}
    assert np.array_equal(fim_diag_set(w, pats).values, fim_diag_set(w, replicated).values)


def test_l1_normalization_gives_unit_mass():
    rng = np.random.default_rng(7)
    w = init_weights(ModelArch(3, (4,)), 1)
    f = fim_diag_patient(w, rng.normal(size=(4, 3)), normalization="l1")
    assert f.values.sum() == pytest.approx(1.0, abs=1e-14)
    assert f.normalization == "l1"


def test_cluster_weights_carry_more_mass_than_edge_weights():
    # nine patients share feature 0, one isolated patient lives on feature 2
    rng = np.random.default_rng(8)
    pats = {}
    for i in range(9):
        X = np.zeros((6, 3))
        X[:, 0] = 1.0 + 0.1 * rng.normal(size=6)
        pats[f"c{i}"] = X
    edge = np.zeros((6, 3))
    edge[:, 2] = 1.0 + 0.1 * rng.normal(size=6)
    pats["edge"] = edge
    X = np.concatenate(list(pats.values()))
    y = np.array([i % 2 for i in range(len(X))])
    arch = ModelArch(3, (), 2)
    w = train(X, y, TrainConfig(learning_rate=1e-2, epochs=5), init_weights(arch, 0))
    F = fim_diag_set(w, pats).values
    W = F[:6].reshape(2, 3)
    # column 0 is informative to the cluster, column 2 only to the edge patient
    assert W[:, 0].min() > 5 * W[:, 2].max()


# --- provenance and persistence ------------------------------------------------------------


def test_fim_validation():
    with pytest.raises(ValueError):
        FimDiagonal(np.array([1.0, -1.0]), FimSource.RETAIN_SET, 1, "x")
    with pytest.raises(ValueError):
        FimDiagonal(np.array([1.0, np.inf]), FimSource.RETAIN_SET, 1, "x")


def test_arch_fingerprint_checked():
    w = init_weights(ModelArch(3, (4,)), 0)
    f = fim_diag_patient(w, np.ones((1, 3)))
    f.check_matches(w)
    with pytest.raises(ValueError):
        f.check_matches(init_weights(ModelArch(3, (4,), activation="tanh"), 0))


def test_fim_file_roundtrip(tmp_path):
    w = init_weights(ModelArch(3, (4,)), 0)
    f = fim_diag_set(w, {"a": np.random.default_rng(9).normal(size=(3, 3))})
    save_fim(tmp_path / "f.json", f, {"checkpoint": "abc"})
    back, extra = load_fim(tmp_path / "f.json")
    assert back == f
    assert extra == {"checkpoint": "abc"}
