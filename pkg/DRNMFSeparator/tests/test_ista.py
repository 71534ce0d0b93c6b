"""Tests for ista.py"""
import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from ista import (IstaConfig, alpha_coherence_bound, alpha_heuristic, cold_start_ista, ista, ista_objective,
                  lipschitz_constant, recurrence_matrix, resolve_alpha, soft_threshold, warm_start_ista)
from snmf import normalize_columns


def _dictionary(seed, F=15, N=8):
    return normalize_columns(np.random.default_rng(seed).uniform(0.0, 1.0, size=(F, N)))


def test_soft_threshold_two_sided():
    z = np.array([-3.0, -0.5, 0.5, 3.0])
    assert soft_threshold(z, 1.0).tolist() == [-2.0, 0.0, 0.0, 2.0]


def test_soft_threshold_one_sided():
    z = np.array([-3.0, -0.5, 0.5, 3.0])
    assert soft_threshold(z, 1.0, nonnegative=True).tolist() == [0.0, 0.0, 0.0, 2.0]


def test_soft_threshold_rejects_negative_threshold():
    with pytest.raises(ValueError):
        soft_threshold(np.zeros(3), -0.1)


def test_ista_matches_explicit_iterations():
    W = _dictionary(0)
    x = np.random.default_rng(1).uniform(size=15)
    cfg = IstaConfig(alpha=3.0, lambda1=0.05, K=7)
    h = np.full(8, 0.1)
    for _ in range(cfg.K):
        h = np.maximum(h - (W.T @ (W @ h - x)) / cfg.alpha - cfg.lambda1 / cfg.alpha, 0.0)
    assert np.allclose(ista(x, W, np.full(8, 0.1), cfg), h, atol=1e-12)


def test_warm_start_chains_frames():
    W = _dictionary(2)
    X = np.random.default_rng(3).uniform(size=(15, 6))
    cfg = IstaConfig(alpha=2.0, K=3)
    H = warm_start_ista(X, W, np.zeros(8), cfg)
    h = np.zeros(8)
    for t in range(6):
        h = ista(X[:, t], W, h, cfg)
        assert np.allclose(H[:, t], h, atol=1e-12)


def test_single_frame_warm_start_equals_ista():
    W = _dictionary(4)
    x = np.random.default_rng(5).uniform(size=15)
    cfg = IstaConfig(alpha=2.0, K=4)
    h0 = np.full(8, 0.2)
    assert np.allclose(warm_start_ista(x[:, None], W, h0, cfg)[:, 0], ista(x, W, h0, cfg), atol=1e-14)


def test_cold_start_solves_frames_independently():
    W = _dictionary(6)
    X = np.random.default_rng(7).uniform(size=(15, 4))
    cfg = IstaConfig(alpha=2.0, K=3)
    h0 = np.full(8, 0.1)
    H = cold_start_ista(X, W, h0, cfg)
    for t in range(4):
        assert np.allclose(H[:, t], ista(X[:, t], W, h0, cfg), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31), st.floats(min_value=0.0, max_value=0.5))
def test_ista_with_lipschitz_step_is_monotone(seed, lambda1):
    W = _dictionary(seed)
    x = np.random.default_rng(seed + 1).uniform(size=15)
    cfg = IstaConfig(alpha=lipschitz_constant(W), lambda1=lambda1, K=1)
    h = np.full(8, 0.5)
    values = [ista_objective(x, W, h, lambda1)]
    for _ in range(20):
        h = ista(x, W, h, cfg)
        values.append(ista_objective(x, W, h, lambda1))
    assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))


def test_more_warm_start_iterations_lower_objective():
    W = _dictionary(8)
    X = np.random.default_rng(9).uniform(size=(15, 20))
    alpha = lipschitz_constant(W)
    objectives = []
    for K in (1, 20):
        H = warm_start_ista(X, W, np.zeros(8), IstaConfig(alpha=alpha, K=K))
        objectives.append(sum(ista_objective(X[:, t], W, H[:, t], 0.1) for t in range(20)))
    assert objectives[1] < objectives[0]


def test_recurrence_matrix():
    W = _dictionary(10)
    S = recurrence_matrix(W, 4.0)
    assert np.allclose(S, np.eye(8) - W.T @ W / 4.0)


def test_alpha_heuristic():
    assert alpha_heuristic(100) == 25.0
    assert alpha_heuristic(1000) == 250.0


def test_coherence_bound_of_orthonormal_columns():
    assert alpha_coherence_bound(np.eye(6)) == 1.0


def test_coherence_bound_of_repeated_column():
    W = normalize_columns(np.ones((4, 3)))
    assert alpha_coherence_bound(W) == pytest.approx(3.0)


def test_coherence_bound_single_atom():
    assert alpha_coherence_bound(np.ones((4, 1)) / 2.0) == 1.0


def test_coherence_bound_dominates_lipschitz_constant():
    W = _dictionary(11)
    assert alpha_coherence_bound(W) >= lipschitz_constant(W) - 1e-12


def test_lipschitz_constant_of_identity():
    assert lipschitz_constant(np.eye(5)) == pytest.approx(1.0)


def test_resolve_alpha():
    W = _dictionary(12)
    assert resolve_alpha("heuristic", W) == 2.0
    assert resolve_alpha("2.5", W) == 2.5
    assert resolve_alpha("lipschitz", W) == pytest.approx(lipschitz_constant(W))
    with pytest.raises(ValueError):
        resolve_alpha("bogus", W)
    with pytest.raises(ValueError):
        resolve_alpha(-1.0, W)


def test_config_validation():
    with pytest.raises(ValueError):
        IstaConfig(alpha=0.0)
    with pytest.raises(ValueError):
        IstaConfig(alpha=1.0, K=0)


def test_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        warm_start_ista(np.ones((10, 3)), _dictionary(13), np.zeros(8), IstaConfig(alpha=2.0))


def _active_set_solution(x, W, lambda1):
    """Nonnegative lasso minimizer found by checking the optimality conditions of every support."""
    N = W.shape[1]
    for mask in range(2 ** N):
        active = [n for n in range(N) if mask >> n & 1]
        h = np.zeros(N)
        if active:
            W_a = W[:, active]
            h[active] = np.linalg.solve(W_a.T @ W_a, W_a.T @ x - lambda1)
        if np.any(h[active] <= 0):
            continue
        correlation = W.T @ (x - W @ h)
        inactive = [n for n in range(N) if n not in active]
        if np.all(correlation[inactive] <= lambda1 + 1e-12):
            return h
    raise AssertionError("no support satisfies the optimality conditions")


@pytest.mark.parametrize("seed", range(5))
def test_long_ista_reaches_lasso_minimizer(seed):
    W = _dictionary(seed, F=10, N=3)
    x = np.random.default_rng(seed + 100).uniform(size=10)
    lambda1 = 0.1
    cfg = IstaConfig(alpha=lipschitz_constant(W), lambda1=lambda1, K=5000)
    h = ista(x, W, np.zeros(3), cfg)
    assert np.max(np.abs(h - _active_set_solution(x, W, lambda1))) <= 1e-8


def test_warm_start_beats_cold_start_on_slowly_varying_frames():
    wins = 0
    for trial in range(100):
        rng = np.random.default_rng(trial)
        W = normalize_columns(rng.uniform(size=(15, 8)))
        H = np.maximum(1.0 + np.cumsum(rng.normal(scale=0.01, size=(8, 20)), axis=1), 0.0)
        X = W @ H
        cfg = IstaConfig(alpha=lipschitz_constant(W), lambda1=0.1, K=3)
        totals = []
        for solver in (warm_start_ista, cold_start_ista):
            H_hat = solver(X, W, np.zeros(8), cfg)
            totals.append(sum(ista_objective(X[:, t], W, H_hat[:, t], 0.1) for t in range(20)))
        wins += totals[0] <= totals[1]
    assert wins >= 95


def test_final_state_is_returned_on_request():
    W = _dictionary(11)
    X = np.random.default_rng(12).uniform(size=(15, 5))
    cfg = IstaConfig(alpha=2.0, lambda1=0.1, K=4)
    H, state = warm_start_ista(X, W, np.zeros(8), cfg, return_state=True)
    assert np.array_equal(state.h, H[:, -1])
    assert np.array_equal(state.h, np.maximum(state.z - cfg.threshold, 0.0))
    assert np.array_equal(H, warm_start_ista(X, W, np.zeros(8), cfg))

    h, state = ista(X[:, 0], W, np.zeros(8), cfg, return_state=True)
    assert np.array_equal(h, state.h)
    assert np.array_equal(h, ista(X[:, 0], W, np.zeros(8), cfg))
