
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, List, Optional
from urllib.parse import quote

import numpy as np
import pandas as pd

from singqa.audio import read_wav
from singqa.errors import ManifestError
from singqa.features import read_feature_file, write_feature_file
from singqa.pitch import N_BINS, PitchConfig, PitchHistogram, PitchTrack, compute_histogram, histogram_sharpness, \
    track_pitch
from singqa.records import UtteranceRecord
from singqa.spectral import SpectralConfig, stft_amplitude_phase

logger = logging.getLogger(__name__)

HISTOGRAM_COLUMNS = ['utt_id'] + [f'p{j}' for j in range(1, N_BINS + 1)] + ['sharpness']


def feature_filename(utt_id: str, suffix: str) -> str:
    """Output file name for an utterance. The id is percent-encoded, so path separators in it cannot leave the
    output directory and distinct ids keep distinct names."""
    return f'{quote(utt_id, safe="")}{suffix}'


@dataclass(frozen=True, eq=False)
class Outcome:
    utt_id: str
    path: Optional[Path] = None
    histogram: Optional[PitchHistogram] = None
    error: Optional[str] = None

    @property
    def ok(self):
        return self.error is None


class PitchTask:
    """Track pitch for one utterance, write its pitch file and keep its histogram."""

    def __init__(self, out_dir: Path, config: PitchConfig):
        self.out_dir = Path(out_dir)
        self.config = config

    def __call__(self, record: UtteranceRecord) -> Outcome:
        if record.wav_path is None:
            raise ManifestError(f'{record.utt_id!r} has no wav_path')
        track = track_pitch(read_wav(record.wav_path), config=self.config)
        path = self.out_dir / feature_filename(record.utt_id, '.pitch.sqaf')
        write_feature_file(track.to_feature_sequence(), path)
        return Outcome(record.utt_id, path=path, histogram=compute_histogram(track, self.config.normalization))


class SpectralTask:

    def __init__(self, out_dir: Path, config: SpectralConfig):
        self.out_dir = Path(out_dir)
        self.config = config

    def __call__(self, record: UtteranceRecord) -> Outcome:
        if record.wav_path is None:
            raise ManifestError(f'{record.utt_id!r} has no wav_path')
        features = stft_amplitude_phase(read_wav(record.wav_path), self.config.frame_shift, self.config.fft_size)
        path = self.out_dir / feature_filename(record.utt_id, '.spec.sqaf')
        write_feature_file(features, path)
        return Outcome(record.utt_id, path=path)


class HistogramTask:
    """Histogram from an already extracted pitch file."""

    def __init__(self, normalization: str):
        self.normalization = normalization

    def __call__(self, record: UtteranceRecord) -> Outcome:
        track = PitchTrack.from_feature_sequence(read_feature_file(record.feature_path('pitch')))
        return Outcome(record.utt_id, path=record.feature_path('pitch'),
                       histogram=compute_histogram(track, self.normalization))


def _guarded(task: Callable[[UtteranceRecord], Outcome]):
    def run(record: UtteranceRecord) -> Outcome:
        try:
            return task(record)
        except Exception as exc:  # One bad utterance must not stop the batch
            logger.error('Failed to process %s: %s', record.utt_id, exc)
            return Outcome(record.utt_id, error=f'{type(exc).__name__}: {exc}')
    return run


def process_utterances(records: List[UtteranceRecord], task: Callable[[UtteranceRecord], Outcome], jobs: int = 1):
    """A generator that runs the task on every record. On the first yield it yields the number of utterances that
    will be processed, then it yields one Outcome per utterance in manifest order (useful for progress bars), and it
    returns the full list of outcomes at the end. Failures are caught per utterance and reported in the outcome."""

    outcomes = []
    run = _guarded(task)

    yield len(records)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs, thread_name_prefix='extract') as pool:
            for outcome in pool.map(run, records):  # map keeps manifest order
                outcomes.append(outcome)
                yield outcome
    else:
        for record in records:
            outcome = run(record)
            outcomes.append(outcome)
            yield outcome

    return outcomes


def histogram_frame(outcomes: Iterable[Outcome]) -> pd.DataFrame:
    """One row per successful outcome: utt_id, the 120 bin values and the sharpness (NaN for all-zero histograms)."""
    rows = []
    for outcome in outcomes:
        if not outcome.ok or outcome.histogram is None:
            continue
        hist = outcome.histogram
        sharpness = histogram_sharpness(hist) if not hist.is_empty else math.nan
        rows.append([outcome.utt_id] + list(np.asarray(hist.bins, dtype=np.float64)) + [sharpness])
    return pd.DataFrame(rows, columns=HISTOGRAM_COLUMNS)
