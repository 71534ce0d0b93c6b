"""
drnmf.py

Deep recurrent NMF network: warm-start ISTA for sparse NMF unfolded into K
untied layers per frame. Layer k at frame t computes

    h_t^(k) = relu((I - W_k^T W_k / alpha_k) h_t^(k-1) + W_k^T x_t / alpha_k - lambda1 / alpha_k)

with h_t^(0) = h_{t-1}^(K) and h_1^(0) = h0. The weights are stored in the log
domain; the realized dictionaries are exp(W_log) with columns rescaled to unit
norm, so every trained layer is still a valid NMF dictionary.

The mask uses the last-layer dictionary split into its speech and noise blocks.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np

from audio import HOP, FRAME_SIZE, Waveform, analysis_window, istft, ola_gain, stft
from errors import NumericError
from ista import recurrence_matrix
from modelfile import load_model, save_model
from snmf import SnmfConfig, infer_H_mu

logger = logging.getLogger("drnmf.network")

EPSILON_LOG = 1e-8
EPSILON_MASK = 1e-12


@dataclass
class DrNmfParams:
    """
    Trainable log-domain weights plus the fixed settings copied from sparse NMF.

    :param W_log: (K, F, N) log-domain dictionaries
    :param alpha_log: (K,) log-domain inverse step sizes
    :param h0_log: (N,) log-domain initial state
    """
    W_log: np.ndarray
    alpha_log: np.ndarray
    h0_log: np.ndarray
    lambda1: float
    n_speech: int
    n_noise: int
    epsilon_log: float = EPSILON_LOG
    epsilon_mask: float = EPSILON_MASK

    def __post_init__(self):
        self.W_log = np.asarray(self.W_log, dtype=np.float64)
        self.alpha_log = np.asarray(self.alpha_log, dtype=np.float64)
        self.h0_log = np.asarray(self.h0_log, dtype=np.float64)
        K, _, N = self.W_log.shape
        if self.alpha_log.shape != (K,):
            raise ValueError(f"alpha_log must have shape ({K},), got {self.alpha_log.shape}")
        if self.h0_log.shape != (N,):
            raise ValueError(f"h0_log must have shape ({N},), got {self.h0_log.shape}")
        if N != self.n_speech + self.n_noise:
            raise ValueError(f"partition {self.n_speech}+{self.n_noise} does not match N={N}")
        if self.lambda1 < 0:
            raise ValueError(f"lambda1 must be nonnegative, got {self.lambda1}")

    @property
    def K(self):
        return self.W_log.shape[0]

    @property
    def F(self):
        return self.W_log.shape[1]

    @property
    def N(self):
        return self.W_log.shape[2]

    def tensors(self):
        """Trainable tensors by name."""
        return {"W_log": self.W_log, "alpha_log": self.alpha_log, "h0_log": self.h0_log}

    def with_tensors(self, tensors):
        return replace(self, **{name: np.array(value, dtype=np.float64) for name, value in tensors.items()})

    def copy(self):
        return self.with_tensors(self.tensors())


@dataclass
class ForwardTrace:
    """
    Everything backward needs from one forward pass.

    states[t, k] holds h_t^(k) for k = 0..K (k = 0 is the warm-start input);
    preact[t, k - 1] holds the pre-ReLU value of layer k.
    """
    W: np.ndarray
    alpha: np.ndarray
    h0: np.ndarray
    X: np.ndarray
    states: np.ndarray
    preact: np.ndarray
    H: np.ndarray
    Y_hat: np.ndarray
    V_hat: np.ndarray
    mask: np.ndarray
    output: np.ndarray


def count_parameters(p):
    """Number of trainable scalars: K F N + K + N."""
    return p.W_log.size + p.alpha_log.size + p.h0_log.size


def _exp(name, value):
    with np.errstate(over="raise", invalid="raise"):
        try:
            result = np.exp(value)
        except FloatingPointError as e:
            raise NumericError(f"overflow realizing {name}") from e
    if not np.all(np.isfinite(result)):
        raise NumericError(f"non-finite values realizing {name}")
    return result


def realize_weights(p):
    """
    :return: (W (K, F, N) with unit-norm nonnegative columns, alpha (K,), h0 (N,))
    """
    E = _exp("W_log", p.W_log)
    norms = np.sqrt(np.sum(E ** 2, axis=1, keepdims=True))
    if np.any(norms == 0):
        raise NumericError("underflow realizing W_log: zero-norm column")
    return E / norms, _exp("alpha_log", p.alpha_log), _exp("h0_log", p.h0_log)


def compute_mask(Y_hat, V_hat, epsilon_mask=EPSILON_MASK):
    """
    (Y_hat + eps/2) / (Y_hat + V_hat + eps); the degenerate 0/0 case gives 0.5.
    """
    return (Y_hat + 0.5 * epsilon_mask) / (Y_hat + V_hat + epsilon_mask)


def signal_approx_loss(Y, X, mask):
    """sum_{f,t} (Y - mask * X)^2"""
    if not (Y.shape == X.shape == mask.shape):
        raise ValueError(f"shape mismatch: Y {Y.shape}, X {X.shape}, mask {mask.shape}")
    return float(np.sum((Y - mask * X) ** 2))


def estimates(W_last, H, n_speech):
    """Speech and noise magnitude estimates from the last-layer dictionary."""
    Y_hat = W_last[:, :n_speech] @ H[:n_speech]
    V_hat = W_last[:, n_speech:] @ H[n_speech:]
    return Y_hat, V_hat


def _check_input(p, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != p.F:
        raise ValueError(f"input must have {p.F} rows, got shape {X.shape}")
    if np.any(X < 0):
        raise ValueError("input magnitude spectrogram has negative entries")
    return X


def forward(p, X):
    """
    Run the unfolded network over all frames of a magnitude spectrogram,
    keeping every intermediate state for backward. Use infer_mask when only
    the mask is needed.
    """
    X = _check_input(p, X)
    W, alpha, h0 = realize_weights(p)
    K, N, T = p.K, p.N, X.shape[1]
    S = [recurrence_matrix(W[k], alpha[k]) for k in range(K)]
    C = [(W[k].T @ X) / alpha[k] for k in range(K)]
    thresholds = p.lambda1 / alpha

    states = np.empty((T, K + 1, N))
    preact = np.empty((T, K, N))
    h = h0
    for t in range(T):
        states[t, 0] = h
        for k in range(K):
            z = S[k] @ h + C[k][:, t]
            preact[t, k] = z - thresholds[k]
            h = np.maximum(z - thresholds[k], 0.0)
            if not np.all(np.isfinite(h)):
                raise NumericError(f"non-finite activations at frame t={t}, layer k={k + 1}")
            states[t, k + 1] = h

    H = states[:, K, :].T.copy()
    Y_hat, V_hat = estimates(W[K - 1], H, p.n_speech)
    mask = compute_mask(Y_hat, V_hat, p.epsilon_mask)
    return ForwardTrace(W=W, alpha=alpha, h0=h0, X=X, states=states, preact=preact, H=H,
                        Y_hat=Y_hat, V_hat=V_hat, mask=mask, output=mask * X)


def infer_activations(p, X, weights=None):
    """
    Last-layer activations H (N x T) without the training trace.

    The threshold is folded into the per-layer drive (W_k^T X - lambda1) / alpha_k
    and finiteness is checked once at the end.

    :param weights: realize_weights(p), if already computed
    """
    X = _check_input(p, X)
    W, alpha, h0 = weights if weights is not None else realize_weights(p)
    S = [recurrence_matrix(W[k], alpha[k]) for k in range(p.K)]
    # Frame-major so each frame's drive is a contiguous row
    D = [np.ascontiguousarray(((W[k].T @ X - p.lambda1) / alpha[k]).T) for k in range(p.K)]

    H = np.empty((X.shape[1], p.N))
    h = h0
    for t in range(X.shape[1]):
        for S_k, D_k in zip(S, D):
            h = S_k @ h
            h += D_k[t]
            np.maximum(h, 0.0, out=h)
        H[t] = h
    if not np.all(np.isfinite(H)):
        raise NumericError("non-finite activations during inference")
    return H.T


def infer_mask(p, X):
    """Speech mask of a noisy magnitude spectrogram (inference path of forward)."""
    weights = realize_weights(p)
    H = infer_activations(p, X, weights)
    Y_hat, V_hat = estimates(weights[0][p.K - 1], H, p.n_speech)
    return compute_mask(Y_hat, V_hat, p.epsilon_mask)


def loss(p, X, Y):
    """Signal-approximation loss of one utterance."""
    trace = forward(p, X)
    return signal_approx_loss(Y, X, trace.mask)


def separate(p, noisy, frame_size=FRAME_SIZE, hop=HOP, mask_override=None):
    """
    Enhance a noisy waveform: mask the complex STFT with the network's mask
    and resynthesize.

    :param mask_override: optional fixed mask (debugging, e.g. all ones)
    """
    spectrogram = stft(noisy, frame_size, hop)
    if mask_override is None:
        mask = infer_mask(p, spectrogram.magnitude)
    else:
        mask = np.broadcast_to(mask_override, spectrogram.magnitude.shape)
    return istft(spectrogram.masked(mask))


def separate_snmf(dictionary, noisy, cfg=None, epsilon_mask=EPSILON_MASK, frame_size=FRAME_SIZE, hop=HOP):
    """
    Sparse NMF baseline: multiplicative-update inference of H, then the same
    mask and resynthesis as the network.
    """
    cfg = cfg or SnmfConfig()
    spectrogram = stft(noisy, frame_size, hop)
    H = infer_H_mu(spectrogram.magnitude, dictionary.W, cfg)
    Y_hat, V_hat = estimates(dictionary.W, H, dictionary.n_speech)
    return istft(spectrogram.masked(compute_mask(Y_hat, V_hat, epsilon_mask)))


class StreamingSeparator:
    """
    Online, frame-sequential version of `separate`.

    Feed arbitrary-size chunks with process(); each call returns the output
    samples that no future frame can still change. flush() returns the tail.
    Memory use is a few frames regardless of the signal length.
    """

    def __init__(self, params, frame_size=FRAME_SIZE, hop=HOP, identity_mask=False):
        if params.F != frame_size // 2 + 1:
            raise ValueError(f"model has F={params.F}, frame_size {frame_size} needs {frame_size // 2 + 1}")
        self.params = params
        self.frame_size = frame_size
        self.hop = hop
        self.identity_mask = identity_mask
        self.window = analysis_window(frame_size)
        self.gain = ola_gain(frame_size, hop)

        W, alpha, h0 = realize_weights(params)
        self.W = W
        self.alpha = alpha
        self.S = [recurrence_matrix(W[k], alpha[k]) for k in range(params.K)]
        self.h = h0

        self._input = np.zeros(0)
        self._accumulator = np.zeros(frame_size)
        self.n_frames = 0

    def _mask_frame(self, magnitude):
        p = self.params
        h = self.h
        for k in range(p.K):
            h = self.S[k] @ h
            h += (self.W[k].T @ magnitude - p.lambda1) / self.alpha[k]
            np.maximum(h, 0.0, out=h)
        if not np.all(np.isfinite(h)):
            raise NumericError(f"non-finite activations at frame t={self.n_frames}")
        self.h = h
        W_last = self.W[p.K - 1]
        y_hat = W_last[:, :p.n_speech] @ h[:p.n_speech]
        v_hat = W_last[:, p.n_speech:] @ h[p.n_speech:]
        return compute_mask(y_hat, v_hat, p.epsilon_mask)

    def process(self, chunk):
        self._input = np.concatenate([self._input, np.asarray(chunk, dtype=np.float64)])
        out = []
        while self._input.size >= self.frame_size:
            spectrum = np.fft.rfft(self._input[:self.frame_size] * self.window)
            mask = np.ones(spectrum.shape) if self.identity_mask else self._mask_frame(np.abs(spectrum))
            self._accumulator += np.fft.irfft(mask * spectrum, n=self.frame_size) * self.window
            self.n_frames += 1

            # The first hop samples are now final
            out.append(self._accumulator[:self.hop] / self.gain)
            self._accumulator = np.concatenate([self._accumulator[self.hop:], np.zeros(self.hop)])
            self._input = self._input[self.hop:]
        return np.concatenate(out) if out else np.zeros(0)

    def flush(self):
        """Remaining frame_size - hop samples of the last frame (empty if no frame was seen)."""
        if self.n_frames == 0:
            return np.zeros(0)
        return self._accumulator[:self.frame_size - self.hop] / self.gain


def separate_stream(p, blocks, identity_mask=False, frame_size=FRAME_SIZE, hop=HOP):
    """
    Generator over output blocks for an iterable of input blocks.

    Raises ValueError once the input is exhausted if it never filled a frame.
    """
    separator = StreamingSeparator(p, frame_size, hop, identity_mask)
    for block in blocks:
        out = separator.process(block)
        if out.size:
            yield out
    if separator.n_frames == 0:
        raise ValueError(f"signal shorter than one frame ({separator._input.size} < {frame_size} samples)")
    yield separator.flush()


def params_metadata(p):
    return {
        "K": p.K,
        "F": p.F,
        "N": p.N,
        "lambda1": p.lambda1,
        "n_speech": p.n_speech,
        "n_noise": p.n_noise,
        "epsilon_log": p.epsilon_log,
        "epsilon_mask": p.epsilon_mask,
    }


def params_arrays(p):
    """Per-layer arrays W_log_k / alpha_log_k (k = 1..K) and h0_log."""
    arrays = {"h0_log": p.h0_log}
    for k in range(p.K):
        arrays[f"W_log_{k + 1}"] = p.W_log[k]
        arrays[f"alpha_log_{k + 1}"] = p.alpha_log[k:k + 1]
    return arrays


def save_params(path, p, extra_arrays=None, extra_metadata=None):
    arrays = params_arrays(p)
    arrays.update(extra_arrays or {})
    metadata = params_metadata(p)
    metadata.update(extra_metadata or {})
    save_model(path, arrays, metadata)


def has_params(arrays):
    return "h0_log" in arrays


def params_from_arrays(arrays, metadata):
    K = int(metadata["K"])
    return DrNmfParams(
        W_log=np.stack([arrays[f"W_log_{k + 1}"] for k in range(K)]),
        alpha_log=np.concatenate([arrays[f"alpha_log_{k + 1}"] for k in range(K)]),
        h0_log=arrays["h0_log"],
        lambda1=float(metadata["lambda1"]),
        n_speech=int(metadata["n_speech"]),
        n_noise=int(metadata["n_noise"]),
        epsilon_log=float(metadata["epsilon_log"]),
        epsilon_mask=float(metadata["epsilon_mask"]),
    )


def load_params(path):
    """
    :return: (DrNmfParams, arrays, metadata)
    """
    arrays, metadata = load_model(path)
    if not has_params(arrays):
        raise ValueError(f"{path}: model file holds no DR-NMF layers")
    return params_from_arrays(arrays, metadata), arrays, metadata
