"""
train.py

End-to-end training of the DR-NMF network.

Main components:
- initialize_from_snmf: network whose every layer equals warm-start ISTA on a
  trained sparse NMF dictionary
- initialize_random: the same network on independent random dictionaries
- backward: reverse-mode gradient of the signal-approximation loss through the
  mask, the last-layer reconstruction, the layer stack and the time recurrence,
  down to the log-domain parameters
- Adam (bias-corrected) updates
- train_loop: shuffled mini-batches, per-epoch validation, early stopping with
  patience and best-checkpoint saving
- gradient_check: central finite differences against backward
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from errors import NumericError
from drnmf import (DrNmfParams, EPSILON_LOG, EPSILON_MASK, compute_mask, estimates, forward, realize_weights,
                   save_params, signal_approx_loss)
from ista import IstaConfig, warm_start_ista

logger = logging.getLogger("drnmf.train")

HISTORY_COLUMNS = ["epoch", "train_loss", "val_loss", "seconds"]


@dataclass
class TrainConfig:
    """
    :param batch_size: utterances per gradient step
    :param max_seq_frames: longest training sequence (longer ones are split)
    :param patience_epochs: epochs without validation improvement before stopping
    :param max_epochs: hard cap on epochs
    :param shuffle_seed: seed of the per-epoch shuffling
    :param n_jobs: joblib workers for the per-utterance forward/backward passes
    """
    batch_size: int = 32
    max_seq_frames: int = 500
    patience_epochs: int = 50
    max_epochs: int = 200
    shuffle_seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        for name in ("batch_size", "max_seq_frames", "patience_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.max_epochs < 0:
            raise ValueError(f"max_epochs must be nonnegative, got {self.max_epochs}")


@dataclass
class AdamState:
    """
    First/second moment accumulators per parameter tensor and the step counter.
    """
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self):
        return AdamState(self.learning_rate, self.beta1, self.beta2, self.eps_adam, self.step,
                         {k: v.copy() for k, v in self.m.items()},
                         {k: v.copy() for k, v in self.v.items()})


def initialize_from_snmf(W, lambda1, K, alpha0, h0_const=1e-3, epsilon_log=EPSILON_LOG,
                         epsilon_mask=EPSILON_MASK):
    """
    Every layer starts from the sparse NMF dictionary and the same ISTA step:
    W_log_k = log(eps + W), alpha_log_k = log(eps + alpha0), h0_log = log(eps + h0_const).

    :param W: snmf.Dictionary with unit-norm columns
    """
    if K < 1:
        raise ValueError(f"K must be at least 1, got {K}")
    layers = np.repeat(W.W[None], K, axis=0)
    return _network(layers, W.n_speech, lambda1, alpha0, h0_const, epsilon_log, epsilon_mask)


def random_dictionaries(F, N, K, seed=0):
    """K independent uniform dictionaries with unit-norm columns, shape (K, F, N)."""
    if min(F, N, K) < 1:
        raise ValueError(f"F, N and K must be positive, got {(F, N, K)}")
    layers = np.random.default_rng(seed).uniform(0.0, 1.0, size=(K, F, N))
    return layers / np.linalg.norm(layers, axis=1, keepdims=True)


def initialize_random(layers, n_speech, lambda1, alpha0, h0_const=1e-3, epsilon_log=EPSILON_LOG,
                      epsilon_mask=EPSILON_MASK):
    """
    Random start for comparison with the sparse NMF initialization: layer k
    uses its own dictionary layers[k] (see random_dictionaries).
    """
    layers = np.asarray(layers, dtype=np.float64)
    if layers.ndim != 3 or not 1 <= n_speech <= layers.shape[2]:
        raise ValueError(f"need (K, F, N) layers and 1 <= n_speech <= N, got {layers.shape} and {n_speech}")
    return _network(layers, n_speech, lambda1, alpha0, h0_const, epsilon_log, epsilon_mask)


def _network(layers, n_speech, lambda1, alpha0, h0_const, epsilon_log, epsilon_mask):
    if not alpha0 > 0:
        raise ValueError(f"alpha0 must be positive, got {alpha0}")
    if not np.allclose(np.linalg.norm(layers, axis=1), 1.0, atol=1e-8):
        raise ValueError("dictionary columns must have unit norm")
    K, _, N = layers.shape
    return DrNmfParams(W_log=np.log(epsilon_log + layers),
                       alpha_log=np.full(K, np.log(epsilon_log + alpha0)),
                       h0_log=np.log(epsilon_log + np.full(N, float(h0_const))),
                       lambda1=lambda1, n_speech=n_speech, n_noise=N - n_speech,
                       epsilon_log=epsilon_log, epsilon_mask=epsilon_mask)


def initialization_equivalence(p, dataset):
    """
    Run an untrained network next to warm-start ISTA on its layer-1 weights.

    Only meaningful while every layer still holds the same weights, i.e.
    right after initialize_from_snmf.

    :param dataset: list of (X, Y) magnitude pairs
    :return: dict with max_abs_H (largest activation difference) and the mean
        losses of the network path and of the ISTA path
    """
    W, alpha, h0 = realize_weights(p)
    ista_cfg = IstaConfig(alpha=float(alpha[0]), lambda1=p.lambda1, K=p.K)
    max_abs_H = 0.0
    network_losses, ista_losses = [], []
    for X, Y in dataset:
        trace = forward(p, X)
        H = warm_start_ista(X, W[0], h0, ista_cfg)
        max_abs_H = max(max_abs_H, float(np.max(np.abs(trace.H - H))))
        Y_hat, V_hat = estimates(W[0], H, p.n_speech)
        network_losses.append(signal_approx_loss(Y, X, trace.mask))
        ista_losses.append(signal_approx_loss(Y, X, compute_mask(Y_hat, V_hat, p.epsilon_mask)))
    return {
        "max_abs_H": max_abs_H,
        "network_loss": float(np.mean(network_losses)),
        "ista_loss": float(np.mean(ista_losses)),
    }


def backward(p, X, Y, trace, corrupt=False):
    """
    Loss and gradients with respect to the log-domain parameters.

    :param trace: ForwardTrace of forward(p, X)
    :param corrupt: negate the input-drive contribution to the W gradient
                    (negative control for gradient checking)
    :return: (loss, {"W_log": ..., "alpha_log": ..., "h0_log": ...})
    """
    W, alpha, h0 = trace.W, trace.alpha, trace.h0
    K, N = p.K, p.N
    T = X.shape[1]
    if trace.X.shape != X.shape or trace.states.shape != (T, K + 1, N) or W.shape != (K, p.F, N):
        raise ValueError("trace does not belong to these parameters and input")

    ns = p.n_speech
    residual = Y - trace.mask * X
    loss = float(np.sum(residual ** 2))

    # Loss -> mask -> (Y_hat, V_hat)
    g_mask = -2.0 * residual * X
    denominator = trace.Y_hat + trace.V_hat + p.epsilon_mask
    g_Y_hat = g_mask * (trace.V_hat + 0.5 * p.epsilon_mask) / denominator ** 2
    g_V_hat = -g_mask * (trace.Y_hat + 0.5 * p.epsilon_mask) / denominator ** 2

    # Reconstruction with the last-layer dictionary
    H = trace.H
    g_W = np.zeros_like(W)
    g_W[K - 1][:, :ns] += g_Y_hat @ H[:ns].T
    g_W[K - 1][:, ns:] += g_V_hat @ H[ns:].T
    g_out = np.empty((N, T))
    g_out[:ns] = W[K - 1][:, :ns].T @ g_Y_hat
    g_out[ns:] = W[K - 1][:, ns:].T @ g_V_hat

    # Back through the layers and across time
    S = [np.eye(N) - (W[k].T @ W[k]) / alpha[k] for k in range(K)]
    g_pre = np.zeros((K, N, T))
    carry = np.zeros(N)
    for t in range(T - 1, -1, -1):
        delta = g_out[:, t] + carry
        for k in range(K - 1, -1, -1):
            # ReLU subgradient is 0 at exactly 0
            delta_z = delta * (trace.preact[t, k] > 0)
            g_pre[k][:, t] = delta_z
            delta = S[k].T @ delta_z
        carry = delta
    g_h0 = carry

    g_alpha = np.zeros(K)
    for k in range(K):
        h_prev = trace.states[:, k, :].T
        g_S = g_pre[k] @ h_prev.T
        C = (W[k].T @ X) / alpha[k]
        # S = I - W^T W / alpha
        g_W[k] += -(W[k] @ (g_S + g_S.T)) / alpha[k]
        g_alpha[k] += np.sum(g_S * (W[k].T @ W[k])) / alpha[k] ** 2
        # C = W^T X / alpha
        input_term = (X @ g_pre[k].T) / alpha[k]
        g_W[k] += -input_term if corrupt else input_term
        g_alpha[k] -= np.sum(g_pre[k] * C) / alpha[k]
        # threshold = lambda1 / alpha enters with a minus sign
        g_alpha[k] += p.lambda1 * np.sum(g_pre[k]) / alpha[k] ** 2

    # Realized weights -> log domain
    E = np.exp(p.W_log)
    norms = np.sqrt(np.sum(E ** 2, axis=1, keepdims=True))
    radial = np.sum(W * g_W, axis=1, keepdims=True)
    g_W_log = (g_W - W * radial) / norms * E

    grads = {
        "W_log": g_W_log,
        "alpha_log": g_alpha * alpha,
        "h0_log": g_h0 * h0,
    }
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    return loss, grads


def loss_and_gradients(p, X, Y):
    trace = forward(p, X)
    return backward(p, X, Y, trace)


def adam_step(state, p, g):
    """
    One bias-corrected Adam update. Inputs are left untouched.

    :return: (new AdamState, new DrNmfParams)
    """
    new_state = state.copy()
    new_state.step += 1
    bias1 = 1.0 - new_state.beta1 ** new_state.step
    bias2 = 1.0 - new_state.beta2 ** new_state.step

    updated = {}
    for name, value in p.tensors().items():
        grad = g[name]
        if grad.shape != value.shape:
            raise ValueError(f"gradient for {name} has shape {grad.shape}, expected {value.shape}")
        m = new_state.m.get(name, np.zeros_like(value))
        v = new_state.v.get(name, np.zeros_like(value))
        m = new_state.beta1 * m + (1.0 - new_state.beta1) * grad
        v = new_state.beta2 * v + (1.0 - new_state.beta2) * (grad * grad)
        new_state.m[name] = m
        new_state.v[name] = v
        m_hat = m / bias1
        v_hat = v / bias2
        updated[name] = value - new_state.learning_rate * m_hat / (np.sqrt(v_hat) + new_state.eps_adam)
    return new_state, p.with_tensors(updated)


def split_sequences(X, Y, max_frames):
    """Cut an utterance into consecutive (X, Y) pieces of at most max_frames frames."""
    if X.shape != Y.shape:
        raise ValueError(f"noisy and clean spectrograms differ in shape: {X.shape} vs {Y.shape}")
    return [(X[:, s:s + max_frames], Y[:, s:s + max_frames]) for s in range(0, X.shape[1], max_frames)]


def evaluate_loss(p, dataset, n_jobs=1):
    """Mean per-utterance signal-approximation loss."""
    if not dataset:
        raise ValueError("empty dataset")
    losses = Parallel(n_jobs=n_jobs)(
        delayed(_utterance_loss)(p, X, Y) for X, Y in dataset
    )
    return float(np.mean(losses))


def _utterance_loss(p, X, Y):
    return signal_approx_loss(Y, X, forward(p, X).mask)


def _batch_gradient(p, batch, n_jobs):
    results = Parallel(n_jobs=n_jobs)(
        delayed(loss_and_gradients)(p, X, Y) for X, Y in batch
    )
    # Fixed-order reduction keeps runs bit-reproducible
    losses = [r[0] for r in results]
    grads = {name: np.zeros_like(value) for name, value in p.tensors().items()}
    for _, g in results:
        for name in grads:
            grads[name] += g[name]
    for name in grads:
        grads[name] /= len(batch)
    return losses, grads


def train_loop(init, train_set, val_set, cfg=None, adam=None, checkpoint_path=None, checkpoint_extra=None,
               baseline_val_loss=None):
    """
    Mini-batch Adam training with early stopping on the validation loss.

    :param train_set: list of (X, Y) magnitude pairs, already split to max_seq_frames
    :param val_set: list of (X, Y) magnitude pairs
    :param checkpoint_path: if given, the best model is written there on every improvement
    :param checkpoint_extra: (extra_arrays, extra_metadata) stored alongside the checkpoint
    :param baseline_val_loss: validation loss of `init`; an epoch must beat it to
        replace `init` as the best model (default: any first epoch does)
    :return: (best params, history DataFrame with epoch,train_loss,val_loss,seconds)
    """
    cfg = cfg or TrainConfig()
    adam = adam or AdamState()
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be nonempty")
    too_long = [X.shape[1] for X, _ in train_set if X.shape[1] > cfg.max_seq_frames]
    if too_long:
        raise ValueError(f"training sequences longer than {cfg.max_seq_frames} frames: {too_long[:5]}")

    rng = np.random.default_rng(cfg.shuffle_seed)
    params = init.copy()
    best_params = init.copy()
    best_val = np.inf if baseline_val_loss is None else float(baseline_val_loss)
    epochs_without_improvement = 0
    rows = []
    extra_arrays, extra_metadata = checkpoint_extra or ({}, {})

    for epoch in range(1, cfg.max_epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(train_set))
        epoch_losses = []
        for b in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[b:b + cfg.batch_size]]
            losses, grads = _batch_gradient(params, batch, cfg.n_jobs)
            epoch_losses.extend(losses)
            adam, params = adam_step(adam, params, grads)

        train_loss = float(np.mean(epoch_losses))
        val_loss = evaluate_loss(params, val_set, cfg.n_jobs)
        seconds = time.perf_counter() - start
        rows.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "seconds": seconds})
        logger.info(f"epoch {epoch}: train {train_loss:.6f}, val {val_loss:.6f} ({seconds:.2f}s)")

        if val_loss < best_val:
            best_val = val_loss
            best_params = params.copy()
            epochs_without_improvement = 0
            if checkpoint_path is not None:
                metadata = dict(extra_metadata, epoch=epoch, val_loss=val_loss)
                save_params(checkpoint_path, best_params, extra_arrays, metadata)
        else:
            epochs_without_improvement += 1
            if epochs_without_improvement >= cfg.patience_epochs:
                logger.info(f"early stopping after {epoch} epochs (best val {best_val:.6f})")
                break

    return best_params, pd.DataFrame(rows, columns=HISTORY_COLUMNS)


def random_model(F, N, K, n_speech=None, lambda1=0.05, seed=0):
    """Small random network used by gradient checking."""
    rng = np.random.default_rng(seed)
    n_speech = N // 2 if n_speech is None else n_speech
    return DrNmfParams(
        W_log=rng.normal(0.0, 0.5, size=(K, F, N)),
        alpha_log=np.log(rng.uniform(0.8, 1.5, size=K) * (1.0 + 0.5 * N)),
        h0_log=rng.normal(-1.0, 0.5, size=N),
        lambda1=lambda1,
        n_speech=n_speech,
        n_noise=N - n_speech,
    )


def _central_difference(p, X, Y, name, index, step):
    tensors = p.tensors()
    values = {}
    for sign in (1.0, -1.0):
        shifted = tensors[name].copy()
        shifted[index] += sign * step
        values[sign] = signal_approx_loss(Y, X, forward(p.with_tensors({name: shifted}), X).mask)
    return (values[1.0] - values[-1.0]) / (2.0 * step)


def relative_error(analytic, numeric, floor=1e-8):
    """|a - n| / max(|a|, |n|, floor)"""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradient_check(sizes=((9, 6, 2, 5),), n_coords=50, step=1e-5, tolerance=1e-5, floor=1e-8, seed=0,
                   corrupt=False):
    """
    Compare backward with central finite differences on random small models.

    :param sizes: iterable of (F, N, K, T)
    :param floor: denominator floor of the relative error, for coordinates whose gradient is ~0
    :return: DataFrame, one row per (size, tensor) with the worst coordinate
    """
    rows = []
    for case, (F, N, K, T) in enumerate(sizes):
        rng = np.random.default_rng([seed, case])
        p = random_model(F, N, K, seed=int(rng.integers(2 ** 31)))
        X = rng.uniform(0.0, 1.0, size=(F, T))
        Y = X * rng.uniform(0.0, 1.0, size=(F, T))
        trace = forward(p, X)
        _, grads = backward(p, X, Y, trace, corrupt=corrupt)

        for name, tensor in p.tensors().items():
            flat = np.arange(tensor.size)
            chosen = flat if tensor.size <= n_coords else rng.choice(flat, size=n_coords, replace=False)
            worst = (0.0, None, 0.0, 0.0)
            for position in chosen:
                index = np.unravel_index(position, tensor.shape)
                numeric = _central_difference(p, X, Y, name, index, step)
                analytic = float(grads[name][index])
                error = relative_error(analytic, numeric, floor=floor)
                if worst[1] is None or error > worst[0]:
                    worst = (error, index, analytic, numeric)
            rows.append({
                "F": F, "N": N, "K": K, "T": T,
                "tensor": name,
                "coords_checked": len(chosen),
                "worst_index": str(tuple(int(i) for i in worst[1])),
                "analytic": worst[2],
                "numeric": worst[3],
                "max_rel_error": worst[0],
                "status": "PASS" if worst[0] < tolerance else "FAIL",
            })
    return pd.DataFrame(rows)
