
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from singqa.errors import AudioFormatError

logger = logging.getLogger(__name__)

# Integer PCM full scale per dtype; unsigned 8-bit is offset binary.
_INT_SCALES = {
    np.dtype(np.int16): 32768.0,
    np.dtype(np.int32): 2147483648.0,
}


@dataclass(frozen=True, eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise AudioFormatError(f'audio clip must be mono, got shape {samples.shape}')
        if samples.size == 0:
            raise AudioFormatError('audio clip has no samples')
        if not np.all(np.isfinite(samples)):
            raise AudioFormatError('audio clip contains non-finite samples')
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise AudioFormatError(f'sample rate must be a positive integer, got {self.sample_rate}')
        samples.setflags(write=False)
        object.__setattr__(self, 'samples', samples)
        object.__setattr__(self, 'sample_rate', int(self.sample_rate))

    @property
    def duration(self):
        return self.samples.size / self.sample_rate

    def __len__(self):
        return self.samples.size


def read_wav(path) -> AudioClip:
    """Read a linear-PCM WAV file into a mono AudioClip. Stereo is averaged, integer samples are scaled to [-1, 1]
    and the file's sample rate is kept as is (no resampling)."""

    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f'WAV file not found: {path}')

    try:
        with warnings.catch_warnings():
            # A short data chunk only produces a warning in scipy; for us it is a truncated file.
            warnings.simplefilter('error', wavfile.WavFileWarning)
            sample_rate, data = wavfile.read(path)
    except wavfile.WavFileWarning as exc:
        raise AudioFormatError(f'{path}: truncated or malformed WAV ({exc})') from exc
    except (ValueError, EOFError) as exc:
        raise AudioFormatError(f'{path}: unsupported or truncated WAV ({exc})') from exc

    if data.dtype in _INT_SCALES:
        samples = data.astype(np.float64) / _INT_SCALES[data.dtype]
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise AudioFormatError(f'{path}: unsupported sample format {data.dtype}')

    if samples.ndim == 2:
        if samples.shape[1] > 2:
            raise AudioFormatError(f'{path}: {samples.shape[1]} channels, only mono and stereo are supported')
        samples = samples.mean(axis=1)  # Downmix by channel average

    if samples.size == 0:
        raise AudioFormatError(f'{path}: no audio frames')

    return AudioClip(samples=samples, sample_rate=sample_rate)


def write_wav(path, clip: AudioClip, pcm16: bool = True) -> None:
    """Write a clip as 16-bit PCM (default) or 32-bit float WAV."""
    if pcm16:
        data = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = clip.samples.astype(np.float32)
    wavfile.write(path, clip.sample_rate, data)


def frame_count(n_samples: int, sample_rate: int, frame_shift: float) -> int:
    """Number of analysis frames: floor(duration / frame_shift) + 1."""
    # The small epsilon keeps exact multiples (e.g. 16000 / 320) from flooring down through rounding noise.
    return int(math.floor(n_samples / (frame_shift * sample_rate) + 1e-9)) + 1


def frame_signal(samples: np.ndarray, sample_rate: int, frame_shift: float, window_length: int) -> np.ndarray:
    """Cut a signal into frames of window_length samples. Frame n is centered on sample round(n * frame_shift * sr);
    frames that would reach past either edge are shifted inward, so every frame lies fully inside the signal.
    Returns a (frames x window_length) array."""

    if frame_shift <= 0:
        raise ValueError(f'frame_shift must be positive, got {frame_shift}')
    if window_length < 1:
        raise ValueError(f'window length must be at least one sample, got {window_length}')
    if samples.size < window_length:
        raise AudioFormatError(
            f'clip has {samples.size} samples, shorter than one {window_length}-sample analysis window'
        )

    n_frames = frame_count(samples.size, sample_rate, frame_shift)
    centers = np.round(np.arange(n_frames) * frame_shift * sample_rate).astype(np.int64)
    starts = np.clip(centers - window_length // 2, 0, samples.size - window_length)

    windows = np.lib.stride_tricks.sliding_window_view(samples, window_length)
    return windows[starts]
