"""
snmf.py

Sparse NMF for the squared-error (beta = 2) case with unit-norm dictionary
columns:

    minimize  1/2 ||X - W H||_F^2 + lambda1 ||H||_1   s.t. W, H >= 0, ||w_n|| = 1

Training follows two stages: a speech dictionary learned on clean speech, then a
noise dictionary learned on noisy speech with the speech block frozen. At test
time only H is optimized.

The W update is the normalization-aware multiplicative update; it moves W along
a scaled tangent (Riemannian) descent direction, so a short backtracking on the
step keeps the objective nonincreasing after column renormalization.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from errors import NumericError
from modelfile import load_model, save_model

logger = logging.getLogger("drnmf.snmf")

# Halvings tried before a W update is skipped for the current step
MAX_BACKTRACKS = 30


@dataclass
class SnmfConfig:
    """
    :param lambda1: sparsity weight on the activations
    :param n_iters: multiplicative-update iterations
    :param epsilon_mu: denominator floor
    :param seed: RNG seed for the uniform initialization
    """
    lambda1: float = 0.1
    beta: int = 2
    n_iters: int = 200
    epsilon_mu: float = 1e-12
    seed: int = 0

    def __post_init__(self):
        if self.beta != 2:
            raise ValueError(f"Only beta = 2 is supported, got {self.beta}")
        if self.lambda1 < 0:
            raise ValueError(f"lambda1 must be nonnegative, got {self.lambda1}")
        if self.n_iters < 0:
            raise ValueError(f"n_iters must be nonnegative, got {self.n_iters}")


@dataclass
class Dictionary:
    """
    F x N nonnegative dictionary [W_speech, W_noise] with unit-norm columns.
    """
    W: np.ndarray
    n_speech: int
    n_noise: int = 0
    objective_trace: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.W.ndim != 2 or self.W.shape[1] != self.n_speech + self.n_noise:
            raise ValueError(
                f"Dictionary has shape {self.W.shape}, expected {self.n_speech + self.n_noise} columns"
            )

    @property
    def N(self):
        return self.W.shape[1]

    @property
    def W_speech(self):
        return self.W[:, :self.n_speech]

    @property
    def W_noise(self):
        return self.W[:, self.n_speech:]


def split_activations(H, n_speech):
    """Row blocks (H_speech, H_noise) of an activation matrix."""
    return H[:n_speech], H[n_speech:]


def _matrix(W):
    return W.W if isinstance(W, Dictionary) else np.asarray(W, dtype=np.float64)


def _check_finite(**factors):
    for name, value in factors.items():
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite values in {name}")


def normalize_columns(W):
    """Scale each column to unit L2 norm; all-zero columns are left as they are."""
    norms = np.linalg.norm(W, axis=0)
    norms[norms == 0] = 1.0
    return W / norms


def random_init(n_rows, n_cols, rng):
    """Uniform(0, 1) entries."""
    return rng.uniform(0.0, 1.0, size=(n_rows, n_cols))


def snmf_objective(X, W, H, lambda1):
    """
    1/2 ||X - W H||_F^2 + lambda1 ||H||_1
    """
    W = _matrix(W)
    if W.shape[0] != X.shape[0] or W.shape[1] != H.shape[0] or H.shape[1] != X.shape[1]:
        raise ValueError(f"shape mismatch: X {X.shape}, W {W.shape}, H {H.shape}")
    residual = X - W @ H
    return 0.5 * float(np.sum(residual ** 2)) + lambda1 * float(np.sum(np.abs(H)))


def update_H(X, W, H, lambda1, epsilon=1e-12):
    """H <- H * (W^T X) / (W^T W H + lambda1 + eps)"""
    numerator = W.T @ X
    denominator = (W.T @ W) @ H + lambda1 + epsilon
    return H * numerator / denominator


def _tangent_mu_candidate(X, W, H, epsilon):
    """Normalization-aware multiplicative update for W (before renormalization)."""
    HHt = H @ H.T
    positive = W @ HHt
    negative = X @ H.T
    numerator = negative + W * np.sum(positive * W, axis=0)
    denominator = positive + W * np.sum(negative * W, axis=0) + epsilon
    return W * numerator / denominator


def update_W(X, W, H, lambda1, update_cols=None, epsilon=1e-12):
    """
    One normalization-aware MU step on the selected columns of W.

    The full multiplicative step is tried first; if the renormalized result
    raises the objective, the step towards it is halved until it does not.
    Columns outside `update_cols` are returned bitwise unchanged.
    """
    n_cols = W.shape[1]
    if update_cols is None:
        update_cols = np.ones(n_cols, dtype=bool)
    update_cols = np.asarray(update_cols, dtype=bool)
    if not update_cols.any():
        return W

    current = snmf_objective(X, W, H, lambda1)
    candidate = _tangent_mu_candidate(X, W, H, epsilon)
    direction = np.where(update_cols, candidate - W, 0.0)

    step = 1.0
    for _ in range(MAX_BACKTRACKS):
        trial = W + step * direction
        norms = np.linalg.norm(trial, axis=0)
        renormalize = update_cols & (norms > 0)
        W_new = W.copy()
        W_new[:, renormalize] = trial[:, renormalize] / norms[renormalize]
        if snmf_objective(X, W_new, H, lambda1) <= current:
            return W_new
        step *= 0.5
    logger.debug("W update rejected after backtracking; keeping current dictionary")
    return W


def mu_step(X, W, H, lambda1, update_W_cols=None, epsilon=1e-12):
    """
    One alternating update: H first, then the unmasked columns of W.

    :param update_W_cols: boolean mask of columns allowed to move (None = all)
    :return: (W, H)
    """
    W = _matrix(W)
    H = update_H(X, W, H, lambda1, epsilon)
    _check_finite(H=H)
    W = update_W(X, W, H, lambda1, update_W_cols, epsilon)
    _check_finite(W=W)
    return W, H


def _run_mu(X, W, H, cfg, update_W_cols, label):
    trace = [snmf_objective(X, W, H, cfg.lambda1)]
    for it in range(1, cfg.n_iters + 1):
        W, H = mu_step(X, W, H, cfg.lambda1, update_W_cols, cfg.epsilon_mu)
        trace.append(snmf_objective(X, W, H, cfg.lambda1))
        if it % 10 == 0:
            logger.info(f"[{label}] iteration {it}: objective {trace[-1]:.6f}")
    return W, H, trace


def train_speech_dict(clean_mags, n_speech, cfg=None):
    """
    Learn the speech block W_speech on concatenated clean magnitude spectrograms.
    """
    cfg = cfg or SnmfConfig()
    if not clean_mags:
        raise ValueError("empty corpus: no clean spectrograms given")
    if n_speech < 1:
        raise ValueError(f"n_speech must be at least 1, got {n_speech}")

    X = np.hstack(clean_mags)
    rng = np.random.default_rng(cfg.seed)
    W = normalize_columns(random_init(X.shape[0], n_speech, rng))
    H = random_init(n_speech, X.shape[1], rng)
    W, H, trace = _run_mu(X, W, H, cfg, None, "speech")
    return Dictionary(W, n_speech, 0, trace)


def train_noise_dict(noisy_mags, W_speech, n_noise, cfg=None):
    """
    Learn the noise block with the speech block frozen.

    :param W_speech: Dictionary (or matrix) holding the trained speech block
    :return: full Dictionary [W_speech, W_noise]
    """
    cfg = cfg or SnmfConfig()
    speech = W_speech if isinstance(W_speech, Dictionary) else Dictionary(W_speech, W_speech.shape[1])
    if n_noise == 0:
        return speech
    if not noisy_mags:
        raise ValueError("empty corpus: no noisy spectrograms given")

    X = np.hstack(noisy_mags)
    # Separate stream from the speech stage so the noise block differs from it
    rng = np.random.default_rng([cfg.seed, 1])
    W_noise = normalize_columns(random_init(X.shape[0], n_noise, rng))
    W = np.hstack([speech.W, W_noise])
    H = random_init(W.shape[1], X.shape[1], rng)
    frozen = np.arange(W.shape[1]) < speech.n_speech
    W, H, trace = _run_mu(X, W, H, cfg, ~frozen, "noise")
    return Dictionary(W, speech.n_speech, n_noise, trace)


def initial_activations(n_rows, n_frames, seed=0):
    """Deterministic uniform initialization for test-time inference."""
    return random_init(n_rows, n_frames, np.random.default_rng(seed))


def infer_H_mu(X, W, cfg=None):
    """
    Solve for H with the dictionary fixed using cfg.n_iters H-only MU steps.
    """
    cfg = cfg or SnmfConfig()
    W = _matrix(W)
    if W.shape[0] != X.shape[0]:
        raise ValueError(f"shape mismatch: X has {X.shape[0]} rows, W has {W.shape[0]}")
    H = initial_activations(W.shape[1], X.shape[1], cfg.seed)
    for _ in range(cfg.n_iters):
        H = update_H(X, W, H, cfg.lambda1, cfg.epsilon_mu)
    _check_finite(H=H)
    return H


def save_dictionary(path, dictionary, cfg, extra_metadata=None):
    """Write the dictionary and its training settings to a DRNMF1 model file."""
    metadata = {
        "n_speech": dictionary.n_speech,
        "n_noise": dictionary.n_noise,
        "N": dictionary.N,
        "lambda1": cfg.lambda1,
        "snmf_iters": cfg.n_iters,
        "nmf_seed": cfg.seed,
    }
    metadata.update(extra_metadata or {})
    save_model(path, {"W": dictionary.W}, metadata)


def load_dictionary(path):
    """
    :return: (Dictionary, metadata)
    """
    arrays, metadata = load_model(path)
    if "W" not in arrays:
        raise ValueError(f"{path}: model file has no dictionary array 'W'")
    return Dictionary(arrays["W"], int(metadata["n_speech"]), int(metadata["n_noise"])), metadata
