
import enum
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from singqa.errors import FeatureFormatError

logger = logging.getLogger(__name__)

MAGIC = b'SQAF'
VERSION = 1

# magic, version, kind code, frame shift (s), frames, dims; all little-endian
HEADER = struct.Struct('<4sBBdII')

PAYLOAD_DTYPE = np.dtype('<f4')


class FeatureKind(enum.Enum):
    EMBEDDING = 0
    SPECTRAL = 1
    PITCH = 2

    @property
    def label(self):
        return self.name.lower()


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    """A frames x dims matrix of frame-level features. Data is held as float32, the on-disk precision."""

    data: np.ndarray
    frame_shift: float
    kind: FeatureKind

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, order='C')  # Private copy
        if data.ndim != 2:
            raise ValueError(f'feature data must be a frames x dims matrix, got shape {data.shape}')
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f'feature data needs at least one frame and one dimension, got shape {data.shape}')
        if not np.all(np.isfinite(data)):
            raise ValueError('feature data contains non-finite values')
        if not self.frame_shift > 0:
            raise ValueError(f'frame_shift must be positive, got {self.frame_shift}')
        data.setflags(write=False)
        object.__setattr__(self, 'data', data)
        object.__setattr__(self, 'frame_shift', float(self.frame_shift))
        object.__setattr__(self, 'kind', FeatureKind(self.kind))

    @property
    def frames(self):
        return self.data.shape[0]

    @property
    def dims(self):
        return self.data.shape[1]

    def truncated(self, frames: int) -> 'FeatureSequence':
        return FeatureSequence(self.data[:frames], self.frame_shift, self.kind)

    def __eq__(self, other):
        if not isinstance(other, FeatureSequence):
            return NotImplemented
        return (
            self.kind is other.kind
            and self.frame_shift == other.frame_shift
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    def __repr__(self):
        return f'FeatureSequence({self.kind.label}, {self.frames}x{self.dims}, shift={self.frame_shift}s)'


def encode_feature_file(seq: FeatureSequence) -> bytes:
    header = HEADER.pack(MAGIC, VERSION, seq.kind.value, seq.frame_shift, seq.frames, seq.dims)
    return header + seq.data.astype(PAYLOAD_DTYPE, copy=False).tobytes(order='C')


def decode_feature_file(blob: bytes, source: str = '<bytes>') -> FeatureSequence:
    if len(blob) < HEADER.size:
        raise FeatureFormatError(f'{source}: {len(blob)} bytes is shorter than the {HEADER.size}-byte header')

    magic, version, kind_code, frame_shift, frames, dims = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FeatureFormatError(f'{source}: bad magic {magic!r}, expected {MAGIC!r}')
    if version != VERSION:
        raise FeatureFormatError(f'{source}: unsupported format version {version}')
    try:
        kind = FeatureKind(kind_code)
    except ValueError:
        raise FeatureFormatError(f'{source}: unknown kind code {kind_code}') from None
    if frames < 1 or dims < 1:
        raise FeatureFormatError(f'{source}: empty matrix {frames}x{dims}')

    payload = memoryview(blob)[HEADER.size:]
    expected = frames * dims * PAYLOAD_DTYPE.itemsize
    if len(payload) != expected:
        raise FeatureFormatError(
            f'{source}: header declares {frames}x{dims} ({expected} bytes) but payload has {len(payload)} bytes'
        )

    data = np.frombuffer(payload, dtype=PAYLOAD_DTYPE).reshape(frames, dims)
    if not np.all(np.isfinite(data)):
        raise FeatureFormatError(f'{source}: payload contains non-finite values')
    if not frame_shift > 0:
        raise FeatureFormatError(f'{source}: frame shift {frame_shift} is not positive')

    return FeatureSequence(data=data, frame_shift=frame_shift, kind=kind)


def write_feature_file(seq: FeatureSequence, path) -> None:
    path = Path(path)
    path.write_bytes(encode_feature_file(seq))
    logger.debug('Wrote %r to %s', seq, path)


def read_feature_file(path) -> FeatureSequence:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f'Feature file not found: {path}')
    return decode_feature_file(path.read_bytes(), source=str(path))
