"""
ista.py

Iterative soft-thresholding for nonnegative sparse coding against a fixed
dictionary, per frame:

    minimize_h  1/2 ||x - W h||^2 + lambda1 ||h||_1   (h >= 0 in one-sided mode)

One iteration with inverse step size alpha is

    z <- (I - W^T W / alpha) h + W^T x / alpha
    h <- soft_{lambda1 / alpha}(z)

warm_start_ista runs K iterations per frame and starts frame t from the
result of frame t - 1.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class IstaConfig:
    """
    :param alpha: inverse step size (the step is 1/alpha)
    :param lambda1: sparsity weight
    :param K: iterations per frame
    :param nonnegative: one-sided threshold (ReLU) instead of the two-sided one
    """
    alpha: float
    lambda1: float = 0.1
    K: int = 5
    nonnegative: bool = True

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.K < 1:
            raise ValueError(f"K must be at least 1, got {self.K}")
        if self.lambda1 < 0:
            raise ValueError(f"lambda1 must be nonnegative, got {self.lambda1}")

    @property
    def threshold(self):
        return self.lambda1 / self.alpha


@dataclass
class IstaState:
    """Coefficients h^(k) and the pre-threshold intermediate z of the last iteration."""
    h: np.ndarray
    z: np.ndarray


def _matrix(W):
    return np.asarray(getattr(W, "W", W), dtype=np.float64)


def soft_threshold(z, b, nonnegative=False):
    """
    Two-sided: sign(z) * max(|z| - b, 0). One-sided: max(z - b, 0).
    """
    if b < 0:
        raise ValueError(f"threshold must be nonnegative, got {b}")
    z = np.asarray(z, dtype=np.float64)
    if nonnegative:
        return np.maximum(z - b, 0.0)
    return np.sign(z) * np.maximum(np.abs(z) - b, 0.0)


def recurrence_matrix(W, alpha):
    """I - W^T W / alpha"""
    return np.eye(W.shape[1]) - (W.T @ W) / alpha


def ista_objective(x, W, h, lambda1):
    """1/2 ||x - W h||^2 + lambda1 ||h||_1 for one frame."""
    W = _matrix(W)
    residual = x - W @ h
    return 0.5 * float(residual @ residual) + lambda1 * float(np.sum(np.abs(h)))


def _check_shapes(X, W, h0):
    if X.shape[0] != W.shape[0]:
        raise ValueError(f"shape mismatch: input has {X.shape[0]} rows, dictionary has {W.shape[0]}")
    if h0.shape != (W.shape[1],):
        raise ValueError(f"shape mismatch: h0 has shape {h0.shape}, expected ({W.shape[1]},)")


def _warm_start(S, C, h0, cfg):
    """
    Core recurrence shared by ista and warm_start_ista.

    :param S: recurrence matrix I - W^T W / alpha
    :param C: input drive W^T X / alpha (N x T)
    :return: (H, last IstaState)
    """
    threshold = cfg.threshold
    h = h0
    z = h0
    H = np.empty((S.shape[0], C.shape[1]))
    for t in range(C.shape[1]):
        for _ in range(cfg.K):
            z = S @ h + C[:, t]
            h = soft_threshold(z, threshold, cfg.nonnegative)
        H[:, t] = h
    return H, IstaState(h=h, z=z)


def ista(x, W, h0, cfg, return_state=False):
    """
    Basic ISTA: exactly cfg.K iterations on one frame starting from h0.

    :return: h^(K), or (h^(K), IstaState) with return_state
    """
    W = _matrix(W)
    x = np.asarray(x, dtype=np.float64)
    h0 = np.asarray(h0, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"x must be a vector, got shape {x.shape}")
    _check_shapes(x[:, None], W, h0)
    C = (W.T @ x[:, None]) / cfg.alpha
    H, state = _warm_start(recurrence_matrix(W, cfg.alpha), C, h0, cfg)
    if return_state:
        return H[:, 0], state
    return H[:, 0]


def warm_start_ista(X, W, h0_init, cfg, return_state=False):
    """
    Sequential ISTA over the columns of X: frame t starts from the output of
    frame t - 1, frame 1 from h0_init.

    :return: activations H (N x T), or (H, IstaState of the last frame) with
        return_state
    """
    W = _matrix(W)
    X = np.asarray(X, dtype=np.float64)
    h0_init = np.asarray(h0_init, dtype=np.float64)
    _check_shapes(X, W, h0_init)
    C = (W.T @ X) / cfg.alpha
    H, state = _warm_start(recurrence_matrix(W, cfg.alpha), C, h0_init, cfg)
    if return_state:
        return H, state
    return H


def cold_start_ista(X, W, h0, cfg):
    """Each frame solved independently from the same h0."""
    W = _matrix(W)
    X = np.asarray(X, dtype=np.float64)
    h0 = np.asarray(h0, dtype=np.float64)
    _check_shapes(X, W, h0)
    S = recurrence_matrix(W, cfg.alpha)
    C = (W.T @ X) / cfg.alpha
    return np.column_stack([_warm_start(S, C[:, t:t + 1], h0, cfg)[0][:, 0] for t in range(X.shape[1])])


def alpha_heuristic(N):
    """alpha = N / 4"""
    if N < 1:
        raise ValueError(f"N must be at least 1, got {N}")
    return N / 4.0


def alpha_coherence_bound(W):
    """
    1 + delta (N - 1), with delta the largest inner product between two
    distinct unit-norm columns of W.
    """
    W = _matrix(W)
    N = W.shape[1]
    if N < 2:
        return 1.0
    gram = W.T @ W
    off_diagonal = gram[~np.eye(N, dtype=bool)]
    delta = float(np.max(off_diagonal))
    return 1.0 + delta * (N - 1)


def lipschitz_constant(W):
    """Largest eigenvalue of W^T W, i.e. the squared spectral norm of W."""
    W = _matrix(W)
    return float(np.linalg.norm(W, ord=2) ** 2)


ALPHA_POLICIES = {
    "heuristic": lambda W: alpha_heuristic(_matrix(W).shape[1]),
    "coherence": alpha_coherence_bound,
    "lipschitz": lipschitz_constant,
}


def resolve_alpha(policy, W):
    """
    Turn an alpha policy name (or a number given as text/float) into a value.
    """
    if isinstance(policy, str) and policy in ALPHA_POLICIES:
        return float(ALPHA_POLICIES[policy](W))
    try:
        value = float(policy)
    except (TypeError, ValueError):
        raise ValueError(
            f"alpha must be a positive number or one of {sorted(ALPHA_POLICIES)}, got {policy!r}"
        ) from None
    if not value > 0:
        raise ValueError(f"alpha must be positive, got {value}")
    return value
