import os
import sys

import numpy as np
import pytest

# Modules of the pipeline import each other as siblings
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from corpus import load_manifest, synth_corpus  # noqa: E402
from snmf import Dictionary, normalize_columns  # noqa: E402


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Six half-second utterances, one per SNR level."""
    out_dir = tmp_path_factory.mktemp("corpus")
    synth_corpus(6, str(out_dir), seed=7, duration_s=0.5)
    manifest = load_manifest(os.path.join(str(out_dir), "manifest.csv"))
    return str(out_dir), manifest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_dictionary(rng, F, n_speech, n_noise):
    W = normalize_columns(rng.uniform(0.0, 1.0, size=(F, n_speech + n_noise)))
    return Dictionary(W, n_speech, n_noise)


@pytest.fixture
def make_dictionary():
    return random_dictionary
