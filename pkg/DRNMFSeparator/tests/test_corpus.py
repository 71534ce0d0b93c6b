"""Tests for corpus.py"""
import os

import numpy as np
import pandas as pd
import pytest
from joblib import parallel_backend

from audio import read_wav
from corpus import (MANIFEST_COLUMNS, PEAK_LEVEL, SNR_LEVELS, MixSpec, load_manifest, load_spectrograms,
                    make_triplet, mix_specs, split_manifest, synth_corpus)
from errors import AudioIOError


def _fake_manifest(n_utts):
    return pd.DataFrame({
        "utt_id": [f"utt{i:04d}" for i in range(n_utts)],
        "snr_db": [SNR_LEVELS[i % len(SNR_LEVELS)] for i in range(n_utts)],
        "clean_path": ["c.wav"] * n_utts,
        "noise_path": ["n.wav"] * n_utts,
        "mix_path": ["m.wav"] * n_utts,
    })


def test_mix_specs_cycle_through_snr_levels():
    specs = mix_specs(12, seed=7)
    counts = pd.Series([s.snr_db for s in specs]).value_counts()
    assert sorted(counts.index) == sorted(SNR_LEVELS)
    assert (counts == 2).all()
    assert len({s.seed for s in specs}) == 12


def test_mix_spec_validates_snr():
    with pytest.raises(ValueError):
        MixSpec(snr_db=1, seed=0)


def test_triplet_keeps_snr_and_peak():
    spec = mix_specs(3, seed=11, duration_s=0.5)[2]
    clean, noise, mixture = make_triplet(spec)
    measured = 10 * np.log10(np.sum(clean.samples ** 2) / np.sum(noise.samples ** 2))
    assert measured == pytest.approx(spec.snr_db, abs=1e-9)
    assert np.allclose(mixture.samples, clean.samples + noise.samples)
    peak = max(np.max(np.abs(w.samples)) for w in (clean, noise, mixture))
    assert peak == pytest.approx(PEAK_LEVEL)


def test_written_files_keep_snr_label(small_corpus):
    _, manifest = small_corpus
    for _, row in manifest.iterrows():
        clean = read_wav(row["clean_path"]).samples
        noise = read_wav(row["noise_path"]).samples
        measured = 10 * np.log10(np.sum(clean ** 2) / np.sum(noise ** 2))
        assert abs(measured - row["snr_db"]) < 0.2


def test_synth_corpus_is_deterministic(tmp_path):
    first = synth_corpus(2, str(tmp_path / "a"), seed=3, duration_s=0.25)
    second = synth_corpus(2, str(tmp_path / "b"), seed=3, duration_s=0.25)
    pd.testing.assert_frame_equal(first, second)
    for name in os.listdir(tmp_path / "a"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_corpus_parallel_matches_serial(tmp_path):
    # Threads keep the workers in this process, where the modules are importable
    synth_corpus(3, str(tmp_path / "serial"), seed=5, duration_s=0.25, n_jobs=1)
    with parallel_backend("threading", n_jobs=2):
        synth_corpus(3, str(tmp_path / "parallel"), seed=5, duration_s=0.25, n_jobs=2)
    for name in os.listdir(tmp_path / "serial"):
        assert (tmp_path / "serial" / name).read_bytes() == (tmp_path / "parallel" / name).read_bytes()


def test_load_manifest_resolves_paths(small_corpus):
    out_dir, _ = small_corpus
    manifest = load_manifest(os.path.join(out_dir, "manifest.csv"))
    assert list(manifest.columns) == MANIFEST_COLUMNS
    assert all(os.path.isabs(p) and os.path.exists(p) for p in manifest["mix_path"])


def test_load_manifest_missing_file(tmp_path):
    with pytest.raises(AudioIOError):
        load_manifest(str(tmp_path / "nope.csv"))


def test_load_manifest_missing_columns(tmp_path):
    path = tmp_path / "bad.csv"
    pd.DataFrame({"utt_id": ["a"]}).to_csv(path, index=False)
    with pytest.raises(ValueError, match="missing columns"):
        load_manifest(str(path))


def test_split_is_stratified_and_disjoint():
    manifest = _fake_manifest(60)
    train, val = split_manifest(manifest, val_fraction=0.2, seed=0)
    assert len(val) == 12 and len(train) == 48
    assert set(train["utt_id"]).isdisjoint(val["utt_id"])
    assert (val["snr_db"].value_counts() == 2).all()


def test_split_is_deterministic():
    manifest = _fake_manifest(30)
    a = split_manifest(manifest, seed=4)
    b = split_manifest(manifest, seed=4)
    pd.testing.assert_frame_equal(a[1], b[1])


def test_split_falls_back_for_small_manifest():
    train, val = split_manifest(_fake_manifest(12), val_fraction=0.2, seed=0)
    assert len(val) == 3 and len(train) == 9


def test_train_fraction_subsamples_training_part():
    train, val = split_manifest(_fake_manifest(60), val_fraction=0.2, seed=0, train_fraction=0.1)
    assert len(train) == 5
    assert len(val) == 12


def test_split_rejects_single_utterance():
    with pytest.raises(ValueError):
        split_manifest(_fake_manifest(1))


def test_load_spectrograms_shapes(small_corpus):
    _, manifest = small_corpus
    pairs = load_spectrograms(manifest.head(2))
    assert len(pairs) == 2
    for X, Y in pairs:
        assert X.shape == Y.shape == (257, (8000 - 512) // 128 + 1)
        assert (X >= 0).all()
