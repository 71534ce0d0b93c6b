"""
corpus.py

This module synthesizes a small, deterministic speech-plus-noise corpus used in
place of a licensed speech database, and reads/splits the resulting manifests.

Supported source types:
- speech: sequences of harmonic-stack "vowels" with gliding pitch, formant
  shaping and amplitude envelopes, separated by short pauses
- noise: band-filtered noise plus amplitude-modulated tones

Every utterance is generated from its own RNG stream (seed, index), so
utterances can be produced in parallel and the WAV bytes depend only on the seeds.
"""

import logging
import os
from dataclasses import dataclass

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.signal import butter, sosfilt
from sklearn.model_selection import train_test_split

from audio import FRAME_SIZE, HOP, SAMPLE_RATE, Waveform, mix_at_snr, read_wav, stft, write_wav
from errors import AudioIOError

logger = logging.getLogger("drnmf.corpus")

# ---------- CONFIGURATION ----------
SNR_LEVELS = (-6, -3, 0, 3, 6, 9)
MANIFEST_COLUMNS = ["utt_id", "snr_db", "clean_path", "noise_path", "mix_path"]
PEAK_LEVEL = 0.9

# First two formants (Hz) of a handful of vowels
VOWEL_FORMANTS = [
    (730, 1090), (270, 2290), (530, 1840), (570, 840), (300, 870), (660, 1720), (490, 1350),
]


@dataclass
class MixSpec:
    """
    Recipe for one mixture of the corpus.
    """
    snr_db: float
    seed: int
    duration_s: float = 2.0

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ValueError(f"duration_s must be positive, got {self.duration_s}")
        if self.snr_db not in SNR_LEVELS:
            raise ValueError(f"snr_db must be one of {SNR_LEVELS}, got {self.snr_db}")


def synth_speech(rng, n_samples):
    """Harmonic-stack vowel sequence with randomized pitch contours and envelopes."""
    t_all = np.arange(n_samples) / SAMPLE_RATE
    out = np.zeros(n_samples)
    pos = int(rng.uniform(0.02, 0.1) * SAMPLE_RATE)
    speaker_f0 = rng.uniform(100.0, 220.0)

    while pos < n_samples:
        seg_len = min(int(rng.uniform(0.15, 0.4) * SAMPLE_RATE), n_samples - pos)
        t = t_all[:seg_len]
        # Pitch glides linearly between two nearby values
        f0_start = speaker_f0 * rng.uniform(0.85, 1.15)
        f0_end = f0_start * rng.uniform(0.8, 1.2)
        f0 = np.linspace(f0_start, f0_end, seg_len)
        phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE

        f1, f2 = VOWEL_FORMANTS[rng.integers(len(VOWEL_FORMANTS))]
        segment = np.zeros(seg_len)
        n_harmonics = int(4000 / max(f0_start, f0_end))
        for k in range(1, n_harmonics + 1):
            freq = k * f0_start
            gain = (np.exp(-((freq - f1) / 150.0) ** 2) + 0.6 * np.exp(-((freq - f2) / 200.0) ** 2)
                    + 0.05 / k)
            segment += gain * np.sin(k * phase + rng.uniform(0, 2 * np.pi))

        # Raised-cosine attack/decay with a random overall level
        envelope = np.sin(np.pi * t / t[-1]) ** 2 if seg_len > 1 else np.ones(1)
        out[pos:pos + seg_len] += rng.uniform(0.3, 1.0) * envelope * segment
        pos += seg_len + int(rng.uniform(0.03, 0.15) * SAMPLE_RATE)

    return out


def synth_noise(rng, n_samples):
    """Band-filtered noise plus one or two amplitude-modulated tones."""
    t = np.arange(n_samples) / SAMPLE_RATE
    low = rng.uniform(100.0, 1500.0)
    high = min(low * rng.uniform(2.0, 6.0), 7500.0)
    sos = butter(4, [low, high], btype="bandpass", fs=SAMPLE_RATE, output="sos")
    noise = sosfilt(sos, rng.standard_normal(n_samples))
    noise /= np.std(noise) + 1e-12

    for _ in range(rng.integers(1, 3)):
        tone_freq = rng.uniform(200.0, 3000.0)
        am_rate = rng.uniform(0.5, 4.0)
        modulation = 0.5 * (1 + np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi)))
        noise += rng.uniform(0.5, 1.5) * modulation * np.sin(2 * np.pi * tone_freq * t)
    return noise


def make_triplet(spec):
    """
    Build (clean, scaled_noise, mixture) for one MixSpec.

    The three signals share one gain so the mixture peaks at PEAK_LEVEL;
    a shared gain leaves the SNR unchanged.
    """
    rng = np.random.default_rng(spec.seed)
    n_samples = int(round(spec.duration_s * SAMPLE_RATE))
    clean = synth_speech(rng, n_samples)
    noise = synth_noise(rng, n_samples)
    mixture, scaled_noise = mix_at_snr(clean, noise, spec.snr_db)

    peak = max(np.max(np.abs(mixture.samples)), np.max(np.abs(clean)), np.max(np.abs(scaled_noise.samples)))
    gain = PEAK_LEVEL / peak
    return Waveform(gain * clean), Waveform(gain * scaled_noise.samples), Waveform(gain * mixture.samples)


def _write_utterance(index, spec, out_dir):
    utt_id = f"utt{index:04d}"
    clean, noise, mixture = make_triplet(spec)
    # Manifest paths are relative to the manifest directory
    paths = {}
    for kind, w in (("clean", clean), ("noise", noise), ("mix", mixture)):
        filename = f"{utt_id}_{kind}.wav"
        write_wav(os.path.join(out_dir, filename), w)
        paths[kind] = filename
    return {
        "utt_id": utt_id,
        "snr_db": spec.snr_db,
        "clean_path": paths["clean"],
        "noise_path": paths["noise"],
        "mix_path": paths["mix"],
    }


def mix_specs(n_utts, seed, duration_s=2.0):
    """SNR levels cycle so that every block of six utterances covers each level once."""
    if n_utts < 1:
        raise ValueError(f"n_utts must be at least 1, got {n_utts}")
    return [
        MixSpec(snr_db=SNR_LEVELS[i % len(SNR_LEVELS)], seed=int(np.random.SeedSequence([seed, i]).generate_state(1)[0]),
                duration_s=duration_s)
        for i in range(n_utts)
    ]


def synth_corpus(n_utts, out_dir, seed=7, duration_s=2.0, n_jobs=1):
    """
    Generate `n_utts` clean/noise/mixture WAV triplets and a manifest.

    :return: manifest DataFrame (also written to out_dir/manifest.csv)
    """
    specs = mix_specs(n_utts, seed, duration_s)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise AudioIOError(out_dir, str(e)) from e

    logger.info(f"Synthesizing {n_utts} utterances into {out_dir} (seed={seed})")
    rows = Parallel(n_jobs=n_jobs)(
        delayed(_write_utterance)(i, spec, out_dir) for i, spec in enumerate(specs)
    )
    manifest = pd.DataFrame(rows, columns=MANIFEST_COLUMNS).sort_values("utt_id").reset_index(drop=True)
    manifest_path = os.path.join(out_dir, "manifest.csv")
    try:
        manifest.to_csv(manifest_path, index=False)
    except OSError as e:
        raise AudioIOError(manifest_path, str(e)) from e
    return manifest


def load_manifest(path):
    """
    Read a manifest CSV; relative WAV paths are resolved against its directory.
    """
    try:
        manifest = pd.read_csv(path)
    except (OSError, pd.errors.ParserError) as e:
        raise AudioIOError(path, str(e)) from e

    missing = [c for c in MANIFEST_COLUMNS if c not in manifest.columns]
    if missing:
        raise ValueError(f"{path}: manifest is missing columns {missing}")

    base = os.path.dirname(os.path.abspath(path))
    for column in ("clean_path", "noise_path", "mix_path"):
        manifest[column] = [p if os.path.isabs(p) else os.path.join(base, p) for p in manifest[column]]
    return manifest.sort_values("utt_id").reset_index(drop=True)


def _stratify_column(frame, n_first, n_second):
    """SNR labels when a stratified split is feasible, else None."""
    counts = frame["snr_db"].value_counts()
    if counts.min() >= 2 and min(n_first, n_second) >= len(counts):
        return frame["snr_db"]
    return None


def split_manifest(manifest, val_fraction=0.2, seed=0, train_fraction=1.0):
    """
    Stratified (by SNR) train/validation split of a manifest.

    `train_fraction` < 1 keeps only that share of the training part,
    again stratified when every SNR level still has enough utterances.
    Small manifests whose parts cannot hold every SNR level fall back to a
    plain random split.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    if not 0.0 < train_fraction <= 1.0:
        raise ValueError(f"train_fraction must be in (0, 1], got {train_fraction}")
    if len(manifest) < 2:
        raise ValueError(f"need at least 2 utterances to split, got {len(manifest)}")

    n_val = min(max(1, int(np.ceil(round(val_fraction * len(manifest), 9)))), len(manifest) - 1)
    stratify = _stratify_column(manifest, n_val, len(manifest) - n_val)
    train, val = train_test_split(manifest, test_size=n_val, random_state=seed, stratify=stratify)

    if train_fraction < 1.0:
        n_keep = max(1, int(round(train_fraction * len(train))))
        if n_keep < len(train):
            keep_stratify = _stratify_column(train, n_keep, len(train) - n_keep)
            train, _ = train_test_split(train, train_size=n_keep, random_state=seed, stratify=keep_stratify)

    return (train.sort_values("utt_id").reset_index(drop=True),
            val.sort_values("utt_id").reset_index(drop=True))


def _utterance_spectrograms(row, frame_size, hop):
    noisy = stft(read_wav(row["mix_path"]), frame_size, hop).magnitude
    clean = stft(read_wav(row["clean_path"]), frame_size, hop).magnitude
    return noisy, clean


def load_spectrograms(manifest, frame_size=FRAME_SIZE, hop=HOP, n_jobs=1):
    """
    Magnitude spectrograms for every manifest row.

    :return: list of (noisy X, clean Y) pairs in manifest order
    """
    return Parallel(n_jobs=n_jobs)(
        delayed(_utterance_spectrograms)(row, frame_size, hop) for _, row in manifest.iterrows()
    )
