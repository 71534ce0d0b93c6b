"""Tests for train.py"""
import numpy as np
import pytest

from conftest import random_dictionary
from drnmf import DrNmfParams, forward, load_params, realize_weights
from ista import alpha_coherence_bound
from snmf import Dictionary
from train import (AdamState, TrainConfig, adam_step, backward, evaluate_loss, gradient_check, initialize_from_snmf,
                   initialize_random, loss_and_gradients, random_dictionaries, random_model, relative_error,
                   split_sequences, train_loop)


def _dataset(seed, n, F=9, T=12):
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        X = rng.uniform(0.0, 1.0, size=(F, T))
        pairs.append((X, X * rng.uniform(0.0, 1.0, size=(F, T))))
    return pairs


def test_gradient_check_passes():
    report = gradient_check()
    assert set(report["tensor"]) == {"W_log", "alpha_log", "h0_log"}
    assert (report["status"] == "PASS").all(), report


def test_gradient_check_catches_corrupted_gradient():
    report = gradient_check(corrupt=True)
    assert (report["status"] == "FAIL").any()
    assert report.set_index("tensor").loc["W_log", "status"] == "FAIL"


def test_relative_error_uses_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-6, 0.0, floor=1e-4) == pytest.approx(1e-2)
    assert relative_error(1e-9, 0.0) == pytest.approx(0.1)
    assert relative_error(1e-6, 0.0) == 1.0


def test_gradients_have_parameter_shapes():
    p = random_model(F=9, N=6, K=2)
    X, Y = _dataset(0, 1)[0]
    value, grads = loss_and_gradients(p, X, Y)
    assert value > 0
    for name, tensor in p.tensors().items():
        assert grads[name].shape == tensor.shape


def test_first_adam_step_moves_by_learning_rate():
    p = random_model(F=9, N=6, K=2)
    grads = {name: np.where(np.arange(v.size).reshape(v.shape) % 2, 1.0, -2.0) for name, v in p.tensors().items()}
    state = AdamState(learning_rate=1e-3)
    new_state, new_p = adam_step(state, p, grads)
    assert new_state.step == 1 and state.step == 0
    for name, value in p.tensors().items():
        assert np.allclose(new_p.tensors()[name] - value, -1e-3 * np.sign(grads[name]), atol=1e-9)


def test_adam_step_leaves_inputs_untouched():
    p = random_model(F=9, N=6, K=2)
    before = {name: v.copy() for name, v in p.tensors().items()}
    grads = {name: np.ones_like(v) for name, v in p.tensors().items()}
    state = AdamState()
    adam_step(state, p, grads)
    assert state.m == {} and state.v == {}
    for name, value in p.tensors().items():
        assert np.array_equal(value, before[name])


def test_zero_gradient_changes_nothing():
    p = random_model(F=9, N=6, K=2)
    grads = {name: np.zeros_like(v) for name, v in p.tensors().items()}
    _, new_p = adam_step(AdamState(), p, grads)
    for name, value in p.tensors().items():
        assert np.array_equal(new_p.tensors()[name], value)


def test_adam_step_checks_gradient_shapes():
    p = random_model(F=9, N=6, K=2)
    grads = {name: np.zeros(1) for name in p.tensors()}
    with pytest.raises(ValueError):
        adam_step(AdamState(), p, grads)


def test_split_sequences():
    X = np.ones((4, 1100))
    pieces = split_sequences(X, X, 500)
    assert [x.shape[1] for x, _ in pieces] == [500, 500, 100]


def test_split_sequences_rejects_mismatch():
    with pytest.raises(ValueError):
        split_sequences(np.ones((4, 10)), np.ones((4, 9)), 5)


def test_evaluate_loss_rejects_empty_dataset():
    with pytest.raises(ValueError, match="empty dataset"):
        evaluate_loss(random_model(F=9, N=6, K=2), [])


def test_train_loop_stops_when_baseline_is_never_beaten(tmp_path):
    init = random_model(F=9, N=6, K=2, seed=1)
    checkpoint = tmp_path / "best.drnmf"
    cfg = TrainConfig(batch_size=2, patience_epochs=2, max_epochs=10)
    best, history = train_loop(init, _dataset(1, 4), _dataset(2, 2), cfg, checkpoint_path=str(checkpoint),
                               baseline_val_loss=0.0)
    assert list(history["epoch"]) == [1, 2]
    for name, value in init.tensors().items():
        assert np.array_equal(best.tensors()[name], value)
    assert not checkpoint.exists()


def test_train_loop_checkpoints_best_epoch(tmp_path):
    init = random_model(F=9, N=6, K=2, seed=2)
    checkpoint = str(tmp_path / "best.drnmf")
    cfg = TrainConfig(batch_size=2, patience_epochs=5, max_epochs=4)
    best, history = train_loop(init, _dataset(3, 4), _dataset(4, 2), cfg, AdamState(learning_rate=1e-2),
                               checkpoint_path=checkpoint, checkpoint_extra=({"W": np.eye(9, 6)}, {"alpha0": 1.5}))
    assert list(history.columns) == ["epoch", "train_loss", "val_loss", "seconds"]
    assert len(history) == 4
    loaded, arrays, metadata = load_params(checkpoint)
    best_row = history.loc[history["val_loss"].idxmin()]
    assert metadata["epoch"] == best_row["epoch"]
    assert metadata["val_loss"] == pytest.approx(best_row["val_loss"])
    assert metadata["alpha0"] == 1.5 and "W" in arrays
    assert np.array_equal(loaded.W_log, best.W_log)
    assert evaluate_loss(best, _dataset(4, 2)) == pytest.approx(history["val_loss"].min())


def test_train_loop_is_deterministic():
    init = random_model(F=9, N=6, K=2, seed=3)
    cfg = TrainConfig(batch_size=3, max_epochs=2, shuffle_seed=9)
    first, h1 = train_loop(init, _dataset(5, 5), _dataset(6, 2), cfg)
    second, h2 = train_loop(init, _dataset(5, 5), _dataset(6, 2), cfg)
    assert np.array_equal(first.W_log, second.W_log)
    assert h1["val_loss"].tolist() == h2["val_loss"].tolist()


def test_train_loop_rejects_long_sequences():
    init = random_model(F=9, N=6, K=2)
    with pytest.raises(ValueError, match="longer than"):
        train_loop(init, _dataset(7, 1, T=20), _dataset(8, 1), TrainConfig(max_seq_frames=10))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=-1)


def test_initialization_reproduces_dictionary(rng):
    dictionary = random_dictionary(rng, 20, 4, 3)
    p = initialize_from_snmf(dictionary, lambda1=0.1, K=3, alpha0=1.75, h0_const=1e-3)
    W, alpha, h0 = realize_weights(p)
    for k in range(3):
        assert np.max(np.abs(W[k] - dictionary.W)) < 1e-7
    assert np.allclose(alpha, 1.75)
    assert np.allclose(h0, 1e-3)
    assert (p.n_speech, p.n_noise) == (4, 3)


def test_initialization_rejects_bad_arguments(rng):
    dictionary = random_dictionary(rng, 20, 4, 3)
    with pytest.raises(ValueError):
        initialize_from_snmf(dictionary, 0.1, K=0, alpha0=1.0)
    with pytest.raises(ValueError):
        initialize_from_snmf(dictionary, 0.1, K=2, alpha0=0.0)
    with pytest.raises(ValueError, match="unit norm"):
        initialize_from_snmf(Dictionary(2.0 * dictionary.W, 4, 3), 0.1, K=2, alpha0=1.0)


def test_gradient_check_passes_on_three_sizes():
    report = gradient_check(sizes=((9, 6, 2, 5), (12, 8, 3, 6), (11, 7, 4, 4)))
    assert len(report) == 9
    assert (report["status"] == "PASS").all(), report
    assert (report["max_rel_error"] < 1e-5).all()


def test_perfect_mask_has_zero_gradients():
    p = random_model(F=9, N=6, K=3, seed=4)
    X, _ = _dataset(9, 1)[0]
    Y = forward(p, X).mask * X
    value, grads = loss_and_gradients(p, X, Y)
    assert value == 0.0
    for g in grads.values():
        assert not np.any(g)


def test_dead_unit_gets_no_weight_gradient():
    # Atom 2 lives on rows 0-1, where the input is silent; the other atoms avoid those rows
    rng = np.random.default_rng(5)
    W_log = np.full((3, 6, 3), -40.0)
    W_log[:, 2:, :2] = rng.normal(0.0, 0.5, size=(3, 4, 2))
    W_log[:, :2, 2] = 0.0
    p = DrNmfParams(W_log, np.full(3, np.log(2.0)), np.log([0.5, 0.5, 1e-3]), 0.1, 2, 1)
    X = rng.uniform(0.0, 1.0, size=(6, 15))
    X[:2] = 0.0
    Y = X * rng.uniform(0.0, 1.0, size=X.shape)

    trace = forward(p, X)
    assert not np.any(trace.states[:, 1:, 2])
    assert (trace.preact[:, :, 2] < 0).all()
    _, grads = backward(p, X, Y, trace)
    assert not np.any(grads["W_log"][1:, :, 2])
    assert np.any(grads["W_log"][:, :, :2])


def test_train_loop_stops_after_patience_on_flat_validation_loss():
    init = random_model(F=9, N=6, K=2, seed=6)
    cfg = TrainConfig(batch_size=2, patience_epochs=3, max_epochs=20)
    _, history = train_loop(init, _dataset(10, 4), _dataset(11, 2), cfg, AdamState(learning_rate=0.0))
    assert list(history["epoch"]) == [1, 2, 3, 4]
    assert history["val_loss"].nunique() == 1


def test_one_epoch_lowers_training_loss():
    init = random_model(F=9, N=6, K=2, seed=7)
    train_set = _dataset(12, 4)
    cfg = TrainConfig(batch_size=4, max_epochs=1)
    trained, history = train_loop(init, train_set, train_set, cfg, AdamState(learning_rate=1e-3))
    assert len(history) == 1
    assert evaluate_loss(trained, train_set) < evaluate_loss(init, train_set)


def test_two_utterances_can_be_overfit():
    # Speech occupies rows 0-3 and noise rows 4-7, so a perfect mask exists
    rng = np.random.default_rng(8)
    pairs = []
    for _ in range(2):
        speech = np.zeros((8, 20))
        noise = np.zeros((8, 20))
        speech[:4] = rng.uniform(0.5, 1.5, size=(4, 20))
        noise[4:] = rng.uniform(0.5, 1.5, size=(4, 20))
        pairs.append((speech + noise, speech))
    dictionary = random_dictionary(rng, 8, 2, 2)
    init = initialize_from_snmf(dictionary, 0.01, K=2, alpha0=alpha_coherence_bound(dictionary.W))
    cfg = TrainConfig(batch_size=2, patience_epochs=200, max_epochs=200)
    _, history = train_loop(init, pairs, pairs, cfg, AdamState(learning_rate=0.02))
    assert history["val_loss"].min() <= 0.5 * evaluate_loss(init, pairs)


def test_random_dictionaries_are_seeded_and_normalized():
    layers = random_dictionaries(10, 5, 3, seed=4)
    assert layers.shape == (3, 10, 5)
    assert np.allclose(np.linalg.norm(layers, axis=1), 1.0)
    assert np.array_equal(layers, random_dictionaries(10, 5, 3, seed=4))
    assert not np.allclose(layers[0], layers[1])
    with pytest.raises(ValueError):
        random_dictionaries(10, 0, 3)


def test_random_initialization_keeps_each_layer():
    layers = random_dictionaries(10, 5, 3, seed=1)
    p = initialize_random(layers, n_speech=3, lambda1=0.1, alpha0=2.5)
    W, alpha, h0 = realize_weights(p)
    assert np.max(np.abs(W - layers)) < 1e-7
    assert np.allclose(alpha, 2.5) and np.allclose(h0, 1e-3)
    assert (p.K, p.n_speech, p.n_noise) == (3, 3, 2)
    with pytest.raises(ValueError):
        initialize_random(layers, n_speech=6, lambda1=0.1, alpha0=2.5)
    with pytest.raises(ValueError, match="unit norm"):
        initialize_random(2.0 * layers, n_speech=3, lambda1=0.1, alpha0=2.5)
