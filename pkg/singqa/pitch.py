
import logging
import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from singqa.audio import AudioClip, frame_signal
from singqa.features import FeatureKind, FeatureSequence

logger = logging.getLogger(__name__)

A4_HZ = 440.0
CENTS_PER_OCTAVE = 1200.0
CENTS_PER_BIN = 10.0
N_BINS = 120

NORMALIZATIONS = ('voiced', 'all')

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class PitchConfig:
    frame_shift: float = 0.02
    f0_min: float = 60.0
    f0_max: float = 800.0
    window: float = 0.04  # analysis window length, seconds
    voicing_threshold: float = 0.3  # minimum clarity for a voiced frame
    dip_threshold: float = 0.1  # YIN absolute threshold on the normalized difference
    normalization: str = 'voiced'

    def __post_init__(self):
        if self.frame_shift <= 0:
            raise ValueError(f'frame_shift must be positive, got {self.frame_shift}')
        if not 0 < self.f0_min < self.f0_max:
            raise ValueError(f'need 0 < f0_min < f0_max, got [{self.f0_min}, {self.f0_max}]')
        if self.window <= 0:
            raise ValueError(f'window must be positive, got {self.window}')
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f'normalization must be one of {NORMALIZATIONS}, got {self.normalization!r}')


@dataclass(frozen=True, eq=False)
class PitchTrack:
    f0_hz: np.ndarray
    voiced: np.ndarray
    frame_shift: float

    def __post_init__(self):
        f0 = np.array(self.f0_hz, dtype=np.float32)  # Stored at feature-file precision
        voiced = np.array(self.voiced, dtype=bool)
        if f0.ndim != 1 or voiced.ndim != 1 or f0.size != voiced.size:
            raise ValueError(f'f0 and voicing must be equal-length vectors, got {f0.shape} and {voiced.shape}')
        if f0.size < 1:
            raise ValueError('pitch track needs at least one frame')
        if not np.all(np.isfinite(f0)):
            raise ValueError('pitch track contains non-finite f0 values')
        if np.any(f0[voiced] <= 0):
            raise ValueError('voiced frames must carry a positive f0')
        if np.any(f0[~voiced] != 0):
            raise ValueError('unvoiced frames must carry f0 = 0')
        if not self.frame_shift > 0:
            raise ValueError(f'frame_shift must be positive, got {self.frame_shift}')
        f0.setflags(write=False)
        voiced.setflags(write=False)
        object.__setattr__(self, 'f0_hz', f0)
        object.__setattr__(self, 'voiced', voiced)
        object.__setattr__(self, 'frame_shift', float(self.frame_shift))

    @property
    def frames(self):
        return self.f0_hz.size

    @property
    def voiced_frames(self):
        return int(np.count_nonzero(self.voiced))

    def to_feature_sequence(self) -> FeatureSequence:
        """Two columns: f0 in Hz and the voicing flag as 0/1."""
        data = np.stack([self.f0_hz, self.voiced.astype(np.float32)], axis=1)
        return FeatureSequence(data=data, frame_shift=self.frame_shift, kind=FeatureKind.PITCH)

    @classmethod
    def from_feature_sequence(cls, seq: FeatureSequence) -> 'PitchTrack':
        if seq.kind is not FeatureKind.PITCH or seq.dims != 2:
            raise ValueError(f'expected a 2-column pitch sequence, got {seq!r}')
        voiced = seq.data[:, 1]
        if not np.all((voiced == 0) | (voiced == 1)):
            raise ValueError('pitch sequence voicing column must hold only 0 and 1')
        return cls(f0_hz=seq.data[:, 0], voiced=voiced.astype(bool), frame_shift=seq.frame_shift)

    def permuted(self, order: np.ndarray) -> 'PitchTrack':
        return PitchTrack(self.f0_hz[order], self.voiced[order], self.frame_shift)


@dataclass(frozen=True, eq=False)
class PitchHistogram:
    bins: np.ndarray
    voiced_frames: int
    total_frames: int

    def __post_init__(self):
        bins = np.array(self.bins, dtype=np.float64)
        if bins.shape != (N_BINS,):
            raise ValueError(f'pitch histogram needs {N_BINS} bins, got shape {bins.shape}')
        if np.any(bins < 0) or not np.all(np.isfinite(bins)):
            raise ValueError('pitch histogram bins must be finite and non-negative')
        bins.setflags(write=False)
        object.__setattr__(self, 'bins', bins)

    @property
    def is_empty(self):
        return not np.any(self.bins > 0)


def hz_to_cent(f_hz: ArrayLike) -> ArrayLike:
    """Convert Hz to cents relative to A4 = 440 Hz: 1200 * log2(f / 440)."""
    f = np.asarray(f_hz, dtype=np.float64)
    if np.any(~(f > 0)):
        raise ValueError(f'frequencies must be positive, got {f_hz}')
    cents = CENTS_PER_OCTAVE * np.log2(f / A4_HZ)
    return float(cents) if cents.ndim == 0 else cents


def fold_to_octave(f_cent: ArrayLike) -> ArrayLike:
    """Map cents onto the continuous bin coordinate (cents / 10) mod 120, floored modulo, always in [0, 120)."""
    c = np.asarray(f_cent, dtype=np.float64)
    if not np.all(np.isfinite(c)):
        raise ValueError(f'cent values must be finite, got {f_cent}')
    folded = np.mod(c / CENTS_PER_BIN, float(N_BINS))
    # A tiny negative input rounds up to exactly 120.0, which belongs to bin 0.
    folded = np.where(folded >= N_BINS, 0.0, folded)
    return float(folded) if folded.ndim == 0 else folded


def compressed_pitch(track: PitchTrack) -> np.ndarray:
    """Per-frame folded pitch I(f_cent) in [0, 120); unvoiced frames are 0."""
    out = np.zeros(track.frames, dtype=np.float64)
    if track.voiced_frames:
        out[track.voiced] = fold_to_octave(hz_to_cent(track.f0_hz[track.voiced].astype(np.float64)))
    return out


def compute_histogram(track: PitchTrack, normalization: str = 'voiced') -> PitchHistogram:
    """Build the 120-bin octave-folded pitch histogram. Bin j (1-based) counts voiced frames with
    j - 1 <= I(f_cent) < j, divided by the number of voiced frames ('voiced') or of all frames ('all')."""

    if normalization not in NORMALIZATIONS:
        raise ValueError(f'normalization must be one of {NORMALIZATIONS}, got {normalization!r}')

    voiced = track.voiced_frames
    if voiced == 0:
        return PitchHistogram(np.zeros(N_BINS), voiced_frames=0, total_frames=track.frames)

    folded = compressed_pitch(track)[track.voiced]
    counts = np.bincount(np.floor(folded).astype(np.int64), minlength=N_BINS)
    normalizer = voiced if normalization == 'voiced' else track.frames
    return PitchHistogram(counts / normalizer, voiced_frames=voiced, total_frames=track.frames)


def histogram_sharpness(hist: PitchHistogram) -> float:
    """Negative Shannon entropy (nats) of the bin distribution; 0 for a single peak, -log(120) when flat.
    Bins are renormalized to sum to 1, so all-frames histograms are measured on the same scale."""

    total = float(hist.bins.sum())
    if total <= 0:
        raise ValueError('sharpness is undefined for an all-zero histogram')
    p = hist.bins[hist.bins > 0] / total
    return float(np.sum(p * np.log(p)))


def _difference_function(frame: np.ndarray, tau_max: int) -> np.ndarray:
    """YIN difference d(tau) for tau = 0..tau_max over an integration window of len(frame) - tau_max samples."""
    width = frame.size - tau_max
    head = frame[:width]
    cross = np.correlate(frame, head, mode='valid')  # cross[tau] = sum_j x[j] * x[j + tau]
    energy = np.concatenate(([0.0], np.cumsum(frame * frame)))
    shifted = energy[width:width + tau_max + 1] - energy[:tau_max + 1]
    diff = energy[width] + shifted - 2.0 * cross
    diff[0] = 0.0
    return np.maximum(diff, 0.0)


def _cumulative_mean_normalized(diff: np.ndarray) -> np.ndarray:
    cmnd = np.ones_like(diff)
    running = np.cumsum(diff[1:])
    taus = np.arange(1, diff.size)
    with np.errstate(divide='ignore', invalid='ignore'):
        cmnd[1:] = np.where(running > 0, diff[1:] * taus / running, 1.0)
    return cmnd


def _pick_lag(cmnd: np.ndarray, tau_min: int, tau_max: int, dip_threshold: float) -> int:
    """First lag whose normalized difference dips below the threshold (followed to its local minimum),
    otherwise the global minimum of the search range."""
    below = np.flatnonzero(cmnd[tau_min:tau_max] < dip_threshold)
    if below.size:
        tau = tau_min + int(below[0])
        while tau + 1 < tau_max and cmnd[tau + 1] < cmnd[tau]:
            tau += 1
        return tau
    return tau_min + int(np.argmin(cmnd[tau_min:tau_max]))


def _refine_lag(diff: np.ndarray, tau: int) -> float:
    """Parabolic interpolation of the difference-function minimum around an integer lag."""
    if tau < 1 or tau + 1 >= diff.size:
        return float(tau)
    a, b, c = diff[tau - 1], diff[tau], diff[tau + 1]
    denom = a - 2.0 * b + c
    if denom <= 0:
        return float(tau)
    return tau + float(np.clip(0.5 * (a - c) / denom, -1.0, 1.0))


def track_pitch(clip: AudioClip, frame_shift: float = PitchConfig.frame_shift, f0_min: float = PitchConfig.f0_min,
                f0_max: float = PitchConfig.f0_max, config: PitchConfig = None) -> PitchTrack:
    """Estimate a frame-level f0 track with a YIN-style normalized autocorrelation tracker.

    One estimate per frame_shift (floor(duration / frame_shift) + 1 frames). Frames whose clarity (1 minus the
    normalized difference at the chosen lag) falls below the voicing threshold, or that carry no energy, are marked
    unvoiced with f0 = 0. Voiced estimates are clipped to [f0_min, f0_max]."""

    if config is None:
        config = PitchConfig(frame_shift=frame_shift, f0_min=f0_min, f0_max=f0_max)
    sr = clip.sample_rate
    if not config.f0_max < sr / 2:
        raise ValueError(f'f0_max {config.f0_max} Hz must be below the Nyquist frequency {sr / 2} Hz')

    window = int(round(config.window * sr))
    tau_min = max(2, int(math.floor(sr / config.f0_max)))
    tau_max = int(math.ceil(sr / config.f0_min))
    if window <= tau_max + 1:
        raise ValueError(
            f'f0_min {config.f0_min} Hz needs lags up to {tau_max} samples, longer than the {window}-sample window'
        )

    frames = frame_signal(clip.samples, sr, config.frame_shift, window)
    f0 = np.zeros(frames.shape[0])
    voiced = np.zeros(frames.shape[0], dtype=bool)

    for n, frame in enumerate(frames):
        if np.mean(frame * frame) < 1e-10:
            continue  # Silence

        diff = _difference_function(frame, tau_max)
        cmnd = _cumulative_mean_normalized(diff)
        tau = _pick_lag(cmnd, tau_min, tau_max, config.dip_threshold)

        clarity = 1.0 - float(cmnd[tau])
        if clarity < config.voicing_threshold:
            continue

        f0[n] = np.clip(sr / _refine_lag(diff, tau), config.f0_min, config.f0_max)
        voiced[n] = True

    logger.debug('Tracked %d frames (%d voiced) at %s s shift', f0.size, voiced.sum(), config.frame_shift)
    return PitchTrack(f0_hz=f0, voiced=voiced, frame_shift=config.frame_shift)
