"""
audio.py

Signal layer of the separation pipeline: waveforms, STFT analysis/synthesis
with square-root Hann windows, SNR-controlled mixing, the SDR metric and
16-bit PCM WAV input/output.

Main components:
- Waveform / Spectrogram containers
- stft / istft (weighted overlap-add, no centering, trailing partial frame dropped)
- mix_at_snr and sdr
- read_wav / write_wav / iter_wav_blocks (soundfile, PCM_16 mono 16 kHz)
"""

import logging
from dataclasses import dataclass

import numpy as np
import soundfile as sf
from scipy.signal import get_window

from errors import AudioFormatError, AudioIOError

logger = logging.getLogger("drnmf.audio")

# ---------- CONFIGURATION ----------
SAMPLE_RATE = 16000
FRAME_SIZE = 512
HOP = 128
PCM_SCALE = 32768.0

# Returned by sdr when the estimate matches the reference exactly
PERFECT_SDR_DB = 300.0


@dataclass
class Waveform:
    """
    Mono signal sampled at 16 kHz.

    :param samples: real amplitudes, roughly in [-1, 1]
    :param sample_rate: must be 16000
    """
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"Waveform must be one-dimensional, got shape {self.samples.shape}")
        if self.samples.size == 0:
            raise ValueError("empty signal")
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"Sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("Waveform contains non-finite samples")

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self):
        return self.samples.size / self.sample_rate


@dataclass
class Spectrogram:
    """
    Paired complex STFT (F x T) and its elementwise modulus.
    """
    complex_stft: np.ndarray
    magnitude: np.ndarray
    frame_size: int = FRAME_SIZE
    hop: int = HOP

    @property
    def n_bins(self):
        return self.complex_stft.shape[0]

    @property
    def n_frames(self):
        return self.complex_stft.shape[1]

    def masked(self, mask):
        """Return a new spectrogram with `mask` applied to the complex STFT."""
        masked = mask * self.complex_stft
        return Spectrogram(masked, np.abs(masked), self.frame_size, self.hop)


def _samples(w):
    if isinstance(w, Waveform):
        return w.samples
    return np.asarray(w, dtype=np.float64)


def analysis_window(frame_size=FRAME_SIZE):
    """Square root of the periodic (DFT-even) Hann window."""
    return np.sqrt(get_window("hann", frame_size, fftbins=True))


def _check_framing(frame_size, hop):
    if frame_size <= 0 or frame_size % 2 != 0:
        raise ValueError(f"frame_size must be a positive even number, got {frame_size}")
    if hop <= 0 or frame_size % hop != 0:
        raise ValueError(f"hop must divide frame_size, got hop={hop}, frame_size={frame_size}")


def ola_gain(frame_size=FRAME_SIZE, hop=HOP):
    """Constant overlap-add gain of the squared window at the given hop."""
    window = analysis_window(frame_size)
    return float(np.sum(window ** 2) / hop)


def stft(w, frame_size=FRAME_SIZE, hop=HOP):
    """
    Short-time Fourier transform with a square-root Hann analysis window.

    Frames start at sample 0 and advance by `hop`; the trailing partial frame
    is dropped, so a signal shorter than one frame is rejected.

    :param w: Waveform or 1-D array
    :return: Spectrogram with F = frame_size/2 + 1 rows
    """
    _check_framing(frame_size, hop)
    x = _samples(w)
    if x.size == 0:
        raise ValueError("empty signal")
    if x.size < frame_size:
        raise ValueError(f"signal shorter than one frame ({x.size} < {frame_size} samples)")

    frames = np.lib.stride_tricks.sliding_window_view(x, frame_size)[::hop]
    spectrum = np.fft.rfft(frames * analysis_window(frame_size), axis=1).T
    return Spectrogram(spectrum, np.abs(spectrum), frame_size, hop)


def istft(s):
    """
    Inverse STFT by weighted overlap-add with the same square-root Hann window.

    The output has frame_size + (T - 1) * hop samples. Reconstruction is exact
    on the interior, where all overlapping frames are present.
    """
    _check_framing(s.frame_size, s.hop)
    n_frames = s.complex_stft.shape[1]
    if s.complex_stft.shape[0] != s.frame_size // 2 + 1:
        raise ValueError(
            f"Spectrogram has {s.complex_stft.shape[0]} bins, expected {s.frame_size // 2 + 1}"
        )
    if n_frames == 0:
        raise ValueError("empty signal")

    window = analysis_window(s.frame_size)
    frames = np.fft.irfft(s.complex_stft.T, n=s.frame_size, axis=1) * window
    out = np.zeros(s.frame_size + (n_frames - 1) * s.hop)
    for t in range(n_frames):
        start = t * s.hop
        out[start:start + s.frame_size] += frames[t]
    return Waveform(out / ola_gain(s.frame_size, s.hop))


def interior_slice(n_samples, frame_size=FRAME_SIZE, hop=HOP):
    """Samples covered by a full set of overlapping frames."""
    margin = frame_size - hop
    return slice(margin, n_samples - margin)


def mix_at_snr(clean, noise, snr_db):
    """
    Scale `noise` so that the clean-to-noise energy ratio equals `snr_db`.

    :return: (mixture, scaled_noise) as Waveforms
    """
    y = _samples(clean)
    v = _samples(noise)
    if y.shape != v.shape:
        raise ValueError(f"clean and noise lengths differ: {y.size} vs {v.size}")
    clean_energy = float(np.sum(y ** 2))
    noise_energy = float(np.sum(v ** 2))
    if clean_energy == 0.0:
        raise ValueError("clean signal has zero energy")
    if noise_energy == 0.0:
        raise ValueError("noise signal has zero energy")

    gain = np.sqrt(clean_energy / (noise_energy * 10.0 ** (snr_db / 10.0)))
    scaled_noise = gain * v
    return Waveform(y + scaled_noise), Waveform(scaled_noise)


def sdr(reference, estimate):
    """
    Signal-to-distortion ratio in dB: 10 log10(sum y^2 / sum (y - y_hat)^2).

    This is a plain energy ratio, not the BSS Eval projection. An exact
    estimate returns PERFECT_SDR_DB.
    """
    y = _samples(reference)
    y_hat = _samples(estimate)
    if y.shape != y_hat.shape:
        raise ValueError(f"reference and estimate lengths differ: {y.size} vs {y_hat.size}")
    signal_energy = float(np.sum(y ** 2))
    if signal_energy == 0.0:
        raise ValueError("reference signal has zero energy")
    error_energy = float(np.sum((y - y_hat) ** 2))
    if error_energy == 0.0:
        return PERFECT_SDR_DB
    return 10.0 * np.log10(signal_energy / error_energy)


def to_pcm16(samples):
    """
    Quantize to int16, saturating out-of-range samples.

    :return: (pcm, n_clipped)
    """
    scaled = np.round(np.asarray(samples, dtype=np.float64) * PCM_SCALE)
    n_clipped = int(np.count_nonzero((scaled > 32767) | (scaled < -32768)))
    return np.clip(scaled, -32768, 32767).astype(np.int16), n_clipped


def read_wav(path):
    """
    Read a mono 16 kHz PCM WAV file.
    """
    try:
        data, rate = sf.read(path, dtype="int16", always_2d=True)
    except (RuntimeError, OSError) as e:
        raise AudioIOError(path, str(e)) from e
    if rate != SAMPLE_RATE:
        raise AudioFormatError(path, f"sample rate {rate} Hz, expected {SAMPLE_RATE}")
    if data.shape[1] != 1:
        raise AudioFormatError(path, f"{data.shape[1]} channels, expected mono")
    return Waveform(data[:, 0].astype(np.float64) / PCM_SCALE)


def write_wav(path, w):
    """
    Write a Waveform as 16-bit PCM mono. Out-of-range samples saturate.

    :return: number of clipped samples
    """
    pcm, n_clipped = to_pcm16(_samples(w))
    if n_clipped:
        logger.warning(f"{n_clipped} samples clipped while writing {path}")
    try:
        sf.write(path, pcm, SAMPLE_RATE, subtype="PCM_16", format="WAV")
    except (RuntimeError, OSError) as e:
        raise AudioIOError(path, str(e)) from e
    return n_clipped


def iter_wav_blocks(path, blocksize=HOP):
    """
    Yield consecutive float blocks of a mono 16 kHz WAV file without loading it whole.
    """
    try:
        info = sf.info(path)
    except (RuntimeError, OSError) as e:
        raise AudioIOError(path, str(e)) from e
    if info.samplerate != SAMPLE_RATE or info.channels != 1:
        raise AudioFormatError(path, f"{info.channels} channels at {info.samplerate} Hz, "
                                     f"expected mono {SAMPLE_RATE} Hz")
    try:
        for block in sf.blocks(path, blocksize=blocksize, dtype="int16", always_2d=True):
            yield block[:, 0].astype(np.float64) / PCM_SCALE
    except (RuntimeError, OSError) as e:
        raise AudioIOError(path, str(e)) from e


class WavStreamWriter:
    """
    Incremental PCM_16 writer used by the streaming separator.
    """

    def __init__(self, path):
        self.path = path
        self.n_clipped = 0
        try:
            self._file = sf.SoundFile(path, mode="w", samplerate=SAMPLE_RATE, channels=1,
                                      subtype="PCM_16", format="WAV")
        except (RuntimeError, OSError) as e:
            raise AudioIOError(path, str(e)) from e

    def write(self, samples):
        if len(samples) == 0:
            return
        pcm, n_clipped = to_pcm16(samples)
        self.n_clipped += n_clipped
        self._file.write(pcm)

    def close(self):
        self._file.close()
        if self.n_clipped:
            logger.warning(f"{self.n_clipped} samples clipped while writing {self.path}")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
