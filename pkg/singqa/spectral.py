
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.signal import get_window

from singqa.audio import AudioClip, frame_signal
from singqa.features import FeatureKind, FeatureSequence

logger = logging.getLogger(__name__)

FLOOR_DB = -80.0
MIN_FFT_SIZE = 64


@dataclass(frozen=True)
class SpectralConfig:
    frame_shift: float = 0.02
    fft_size: Optional[int] = None  # None: smallest power of two holding the window

    def __post_init__(self):
        if self.frame_shift <= 0:
            raise ValueError(f'frame_shift must be positive, got {self.frame_shift}')
        if self.fft_size is not None:
            _check_fft_size(self.fft_size)


def _check_fft_size(fft_size: int):
    if fft_size < MIN_FFT_SIZE or fft_size & (fft_size - 1):
        raise ValueError(f'fft_size must be a power of two >= {MIN_FFT_SIZE}, got {fft_size}')


def default_fft_size(sample_rate: int, frame_shift: float) -> int:
    window = int(round(2 * frame_shift * sample_rate))
    return max(MIN_FFT_SIZE, 1 << max(0, (window - 1).bit_length()))


def stft_amplitude_phase(clip: AudioClip, frame_shift: float = SpectralConfig.frame_shift,
                         fft_size: Optional[int] = None) -> FeatureSequence:
    """Frame-level log-amplitude and phase spectra.

    Each frame is a Hann window of 2 * frame_shift seconds (50% overlap), framed exactly like the pitch tracker so
    both have the same frame count. Log amplitudes are in dB relative to the utterance's spectral peak, floored at
    -80 dB; phases lie in (-pi, pi]. Output dims = fft_size + 2, amplitudes first."""

    sr = clip.sample_rate
    if fft_size is None:
        fft_size = default_fft_size(sr, frame_shift)
    _check_fft_size(fft_size)

    window_length = int(round(2 * frame_shift * sr))
    if window_length > fft_size:
        raise ValueError(
            f'{window_length}-sample window ({2 * frame_shift} s at {sr} Hz) does not fit fft_size {fft_size}'
        )

    frames = frame_signal(clip.samples, sr, frame_shift, window_length)
    window = get_window('hann', window_length, fftbins=True)
    spectrum = np.fft.rfft(frames * window, n=fft_size, axis=1)

    magnitude = np.abs(spectrum)
    peak = magnitude.max()
    if peak > 0:
        with np.errstate(divide='ignore'):
            log_amplitude = 20.0 * np.log10(magnitude / peak)
        log_amplitude = np.maximum(log_amplitude, FLOOR_DB)
    else:
        log_amplitude = np.full(magnitude.shape, FLOOR_DB)  # Digital silence

    # angle() may return -pi, and values just above it round to -pi in float32 storage; both wrap to +pi.
    phase = np.angle(spectrum)
    phase = np.where(phase.astype(np.float32) <= -np.float32(np.pi), np.pi, phase)

    data = np.concatenate([log_amplitude, phase], axis=1)
    logger.debug('Spectral features: %d frames x %d dims (fft %d)', data.shape[0], data.shape[1], fft_size)
    return FeatureSequence(data=data, frame_shift=frame_shift, kind=FeatureKind.SPECTRAL)
