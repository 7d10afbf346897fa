
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from scipy.io import wavfile

from singqa.audio import AudioClip
from singqa.features import FeatureKind, FeatureSequence, write_feature_file
from singqa.records import MANIFEST_COLUMNS


def sine(freq, duration=1.0, sample_rate=16000, amplitude=0.5) -> np.ndarray:
    t = np.arange(int(round(duration * sample_rate))) / sample_rate
    return amplitude * np.sin(2 * np.pi * freq * t)


@pytest.fixture
def sine_clip():
    def make(freq, duration=1.0, sample_rate=16000, amplitude=0.5) -> AudioClip:
        return AudioClip(sine(freq, duration, sample_rate, amplitude), sample_rate)
    return make


@pytest.fixture
def write_sine_wav(tmp_path):
    """Write a 16-bit PCM sine (freq 0 gives digital silence) and return its path."""

    def write(name, freq, duration=1.0, sample_rate=16000, amplitude=0.5) -> Path:
        samples = sine(freq, duration, sample_rate, amplitude) if freq else np.zeros(int(duration * sample_rate))
        path = tmp_path / name
        wavfile.write(path, sample_rate, np.round(samples * 32767).astype(np.int16))
        return path
    return write


@pytest.fixture
def write_embedding(tmp_path):
    """Write an embedding SQAF file from a frames x dims matrix and return its path."""

    def write(name, data, frame_shift=0.02) -> Path:
        path = tmp_path / name
        write_feature_file(FeatureSequence(np.asarray(data), frame_shift, FeatureKind.EMBEDDING), path)
        return path
    return write


@pytest.fixture
def write_manifest_csv(tmp_path):
    """Write a manifest CSV from a list of dicts (missing columns left empty) and return its path."""

    def write(name, rows) -> Path:
        path = tmp_path / name
        frame = pd.DataFrame(rows)
        for column in MANIFEST_COLUMNS:
            if column not in frame.columns:
                frame[column] = ''
        frame[list(MANIFEST_COLUMNS)].to_csv(path, index=False)
        return path
    return write


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
