
import enum
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple, Union

import numpy as np

from singqa.errors import AlignmentError, TrainingError
from singqa.features import FeatureKind, FeatureSequence
from singqa.pitch import N_BINS, PitchTrack, compressed_pitch, compute_histogram
from singqa.spectral import FLOOR_DB
from singqa.training import PARAM_DTYPE, SGDProblem, TrainConfig, TrainingLog, run_sgd

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5
DEFAULT_PROJECTION_DIM = 64

# align_frames tolerances
FRAME_SHIFT_TOLERANCE = 0.01
MAX_FRAME_DIFFERENCE = 2


class Variant(enum.Enum):
    PLAIN = 'plain'
    COMPRESSED_PITCH = 'compressed_pitch'
    PITCH_HISTOGRAM = 'pitch_histogram'
    SPECTRUM = 'spectrum'

    @property
    def needs_pitch(self):
        return self in (Variant.COMPRESSED_PITCH, Variant.PITCH_HISTOGRAM)

    @property
    def needs_spectral(self):
        return self is Variant.SPECTRUM

    @staticmethod
    def names():
        return [v.value for v in Variant]


@dataclass(frozen=True)
class HeadConfig:
    variant: Variant
    embedding_dim: int
    aux_dim: int = 0
    raw_aux_dim: int = 0  # spectral frame width before projection (spectrum only)
    use_layer_norm: bool = False  # pitch_histogram only
    voicing_channel: bool = True  # compressed_pitch only
    histogram_norm: str = 'voiced'
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'variant', Variant(self.variant))
        if self.embedding_dim < 1:
            raise ValueError(f'embedding_dim must be positive, got {self.embedding_dim}')
        expected = {
            Variant.PLAIN: 0,
            Variant.COMPRESSED_PITCH: 2 if self.voicing_channel else 1,
            Variant.PITCH_HISTOGRAM: N_BINS,
        }.get(self.variant)
        if expected is not None and self.aux_dim != expected:
            raise ValueError(f'{self.variant.value} head needs aux_dim {expected}, got {self.aux_dim}')
        if self.variant is Variant.SPECTRUM and (self.aux_dim < 1 or self.raw_aux_dim < 1):
            raise ValueError('spectrum head needs positive aux_dim (projection width) and raw_aux_dim')
        if self.variant is not Variant.SPECTRUM and self.raw_aux_dim:
            raise ValueError(f'raw_aux_dim only applies to the spectrum head, got {self.raw_aux_dim}')
        if self.use_layer_norm and self.variant is not Variant.PITCH_HISTOGRAM:
            raise ValueError('layer normalization is only used by the pitch_histogram head')

    @classmethod
    def for_variant(cls, variant, embedding_dim: int, raw_aux_dim: int = 0,
                    projection_dim: int = DEFAULT_PROJECTION_DIM,
                    use_layer_norm: bool = True, voicing_channel: bool = True, histogram_norm: str = 'voiced',
                    seed: int = 0) -> 'HeadConfig':
        """Build a config with the aux dimension implied by the variant."""
        variant = Variant(variant)
        aux_dim = {
            Variant.PLAIN: 0,
            Variant.COMPRESSED_PITCH: 2 if voicing_channel else 1,
            Variant.PITCH_HISTOGRAM: N_BINS,
            Variant.SPECTRUM: projection_dim,
        }[variant]
        return cls(
            variant=variant,
            embedding_dim=embedding_dim,
            aux_dim=aux_dim,
            raw_aux_dim=raw_aux_dim if variant is Variant.SPECTRUM else 0,
            use_layer_norm=use_layer_norm and variant is Variant.PITCH_HISTOGRAM,
            voicing_channel=voicing_channel,
            histogram_norm=histogram_norm,
            seed=seed,
        )

    @property
    def feature_dim(self):
        return self.embedding_dim + self.aux_dim

    @property
    def base_dim(self):
        """Width of the parameter-free pooled vector the head transforms."""
        return self.embedding_dim if self.variant is Variant.SPECTRUM else self.feature_dim


@dataclass(frozen=True, eq=False)
class HeadInputs:
    """Everything one utterance contributes to a head: the embedding sequence plus the variant's auxiliary input."""

    embedding: FeatureSequence
    pitch: Optional[PitchTrack] = None
    spectral: Optional[FeatureSequence] = None


@dataclass(frozen=True, eq=False)
class PooledInputs:
    """Parameter-free part of the assembled features. base: (n, base_dim). spectral: (n, raw_aux_dim) frame means of
    the scaled spectral features (spectrum variant; pooling commutes with the linear projection)."""

    base: np.ndarray
    spectral: Optional[np.ndarray] = None

    @property
    def n(self):
        return self.base.shape[0]

    def rows(self, idx) -> 'PooledInputs':
        return PooledInputs(self.base[idx], None if self.spectral is None else self.spectral[idx])

    @classmethod
    def stack(cls, items) -> 'PooledInputs':
        items = list(items)
        base = np.stack([item.base[0] for item in items])
        spectral = None if items[0].spectral is None else np.stack([item.spectral[0] for item in items])
        return cls(base, spectral)


def spectral_scale(raw_dim: int) -> np.ndarray:
    """Per-channel factors applied to spectral frames before the projection: dB amplitudes over 80, phases over pi,
    all over sqrt(raw_dim). Pooled vectors then have norm at most 1 whatever the FFT size."""
    half = raw_dim // 2
    scale = np.concatenate([np.full(half, 1.0 / -FLOOR_DB), np.full(raw_dim - half, 1.0 / np.pi)])
    return scale / np.sqrt(raw_dim)


@dataclass(eq=False)
class PredictorHead:
    config: HeadConfig
    weights: np.ndarray
    bias: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=PARAM_DTYPE))
    projection: Optional[np.ndarray] = None
    norm_scale: Optional[np.ndarray] = None
    norm_offset: Optional[np.ndarray] = None

    def __post_init__(self):
        cfg = self.config
        self.weights = np.array(self.weights, dtype=PARAM_DTYPE).ravel()
        self.bias = np.array(self.bias, dtype=PARAM_DTYPE).reshape(1)
        if self.weights.size != cfg.feature_dim:
            raise ValueError(f'{cfg.variant.value} head needs {cfg.feature_dim} weights, got {self.weights.size}')

        if cfg.variant is Variant.SPECTRUM:
            if self.projection is None:
                raise ValueError('spectrum head needs a projection matrix')
            self.projection = np.array(self.projection, dtype=PARAM_DTYPE)
            if self.projection.shape != (cfg.aux_dim, cfg.raw_aux_dim):
                raise ValueError(f'projection must be {cfg.aux_dim}x{cfg.raw_aux_dim}, got {self.projection.shape}')
        elif self.projection is not None:
            raise ValueError('only the spectrum head has a projection')

        if cfg.use_layer_norm:
            if self.norm_scale is None:
                self.norm_scale = np.ones(cfg.feature_dim)
            if self.norm_offset is None:
                self.norm_offset = np.zeros(cfg.feature_dim)
            self.norm_scale = np.array(self.norm_scale, dtype=PARAM_DTYPE).ravel()
            self.norm_offset = np.array(self.norm_offset, dtype=PARAM_DTYPE).ravel()
            if self.norm_scale.size != cfg.feature_dim or self.norm_offset.size != cfg.feature_dim:
                raise ValueError(f'layer-norm affine parameters need {cfg.feature_dim} values each')
        elif self.norm_scale is not None or self.norm_offset is not None:
            raise ValueError('layer-norm parameters given for a head without layer normalization')

    @classmethod
    def initial(cls, config: HeadConfig, bias: float = 0.0) -> 'PredictorHead':
        """Untrained head: small seeded random weights, unit layer-norm scale, random projection."""
        rng = np.random.default_rng(config.seed)
        weights = rng.normal(0.0, 0.01, size=config.feature_dim)
        projection = None
        if config.variant is Variant.SPECTRUM:
            projection = rng.normal(0.0, 1.0, size=(config.aux_dim, config.raw_aux_dim))
        return cls(config=config, weights=weights, bias=[bias], projection=projection)

    @property
    def variant(self):
        return self.config.variant

    @property
    def params(self) -> Dict[str, np.ndarray]:
        out = {'weights': self.weights, 'bias': self.bias}
        if self.projection is not None:
            out['projection'] = self.projection
        if self.norm_scale is not None:
            out['norm_scale'] = self.norm_scale
            out['norm_offset'] = self.norm_offset
        return out

    def copy(self) -> 'PredictorHead':
        return PredictorHead(self.config, **{k: v.copy() for k, v in self.params.items()})

    def transform(self, pooled: PooledInputs) -> np.ndarray:
        return transform_pooled(self.params, self.config, pooled)

    def predict(self, pooled: PooledInputs) -> np.ndarray:
        return predict_pooled(self.params, self.config, pooled)

    def __repr__(self):
        return f'PredictorHead({self.variant.value}, {self.config.feature_dim} features)'


def mean_pool(seq: Union[FeatureSequence, np.ndarray]) -> np.ndarray:
    """Per-dimension arithmetic mean over frames."""
    data = seq.data if isinstance(seq, FeatureSequence) else np.asarray(seq)
    if data.ndim != 2 or data.shape[0] < 1:
        raise ValueError(f'mean pooling needs a non-empty frames x dims matrix, got shape {data.shape}')
    return data.mean(axis=0, dtype=np.float64)


def _normalize_rows(u: np.ndarray) -> np.ndarray:
    mean = u.mean(axis=-1, keepdims=True)
    var = u.var(axis=-1, keepdims=True)  # Population variance
    return (u - mean) / np.sqrt(var + LAYER_NORM_EPS)


def layer_normalize(v, scale=None, offset=None) -> np.ndarray:
    """(v - mean(v)) / sqrt(var(v) + 1e-5), then the per-dimension affine scale * x + offset when given."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size < 2:
        raise ValueError(f'layer normalization needs a vector of at least 2 dims, got shape {v.shape}')
    out = _normalize_rows(v)
    if scale is not None:
        out = out * np.asarray(scale, dtype=np.float64)
    if offset is not None:
        out = out + np.asarray(offset, dtype=np.float64)
    return out


def align_frames(emb: FeatureSequence, aux: FeatureSequence) -> Tuple[FeatureSequence, FeatureSequence]:
    """Bring two frame sequences to a common length. Frame shifts must agree within 1%; lengths differing by at most
    two frames are truncated to the shorter one."""

    shift = max(emb.frame_shift, aux.frame_shift)
    if abs(emb.frame_shift - aux.frame_shift) > FRAME_SHIFT_TOLERANCE * shift:
        raise AlignmentError(f'frame shifts differ: {emb.frame_shift} s vs {aux.frame_shift} s')
    difference = abs(emb.frames - aux.frames)
    if difference > MAX_FRAME_DIFFERENCE:
        raise AlignmentError(
            f'frame counts differ by {difference} ({emb.frames} vs {aux.frames}), tolerance is {MAX_FRAME_DIFFERENCE}'
        )
    if difference == 0:
        return emb, aux
    frames = min(emb.frames, aux.frames)
    return emb.truncated(frames), aux.truncated(frames)


def compressed_pitch_channels(track: PitchTrack, voicing_channel: bool = True) -> np.ndarray:
    """Per-frame auxiliary channels: I(f_cent) / 120 (0 when unvoiced) and, optionally, the 0/1 voicing flag."""
    channels = [compressed_pitch(track) / N_BINS]
    if voicing_channel:
        channels.append(track.voiced.astype(np.float64))
    return np.stack(channels, axis=1)


def pool_inputs(inputs: HeadInputs, config: HeadConfig) -> PooledInputs:
    """Pool one utterance's inputs into the parameter-free part of its feature vector."""

    variant = config.variant
    emb = inputs.embedding
    if emb.dims != config.embedding_dim:
        raise ValueError(f'embedding has {emb.dims} dims, head expects {config.embedding_dim}')

    if variant is Variant.PLAIN:
        return PooledInputs(mean_pool(emb)[None, :])

    if variant.needs_pitch and inputs.pitch is None:
        raise ValueError(f'{variant.value} head needs a pitch track')

    if variant is Variant.COMPRESSED_PITCH:
        emb, pitch_seq = align_frames(emb, inputs.pitch.to_feature_sequence())
        track = PitchTrack.from_feature_sequence(pitch_seq)
        frames = np.concatenate(
            [emb.data.astype(np.float64), compressed_pitch_channels(track, config.voicing_channel)], axis=1
        )
        return PooledInputs(mean_pool(frames)[None, :])

    if variant is Variant.PITCH_HISTOGRAM:
        histogram = compute_histogram(inputs.pitch, config.histogram_norm)
        return PooledInputs(np.concatenate([mean_pool(emb), histogram.bins])[None, :])

    if inputs.spectral is None:
        raise ValueError('spectrum head needs spectral features')
    if inputs.spectral.kind is not FeatureKind.SPECTRAL or inputs.spectral.dims != config.raw_aux_dim:
        raise ValueError(f'spectrum head expects {config.raw_aux_dim}-dim spectral features, got {inputs.spectral!r}')
    emb, spec = align_frames(emb, inputs.spectral)
    return PooledInputs(mean_pool(emb)[None, :], (mean_pool(spec) * spectral_scale(config.raw_aux_dim))[None, :])


def transform_pooled(params: Dict[str, np.ndarray], config: HeadConfig, pooled: PooledInputs) -> np.ndarray:
    """Apply the parametric part of feature assembly (spectral projection, layer normalization). Returns (n, D)."""
    if config.variant is Variant.SPECTRUM:
        projected = pooled.spectral @ np.asarray(params['projection'], dtype=np.float64).T
        return np.concatenate([pooled.base, projected], axis=1)
    if config.use_layer_norm:
        z = _normalize_rows(pooled.base)
        return z * params['norm_scale'].astype(np.float64) + params['norm_offset'].astype(np.float64)
    return pooled.base


def predict_pooled(params: Dict[str, np.ndarray], config: HeadConfig, pooled: PooledInputs) -> np.ndarray:
    features = transform_pooled(params, config, pooled)
    return features @ params['weights'].astype(np.float64) + float(params['bias'][0])


def head_gradients(params: Dict[str, np.ndarray], config: HeadConfig, pooled: PooledInputs,
                   coef: np.ndarray) -> Dict[str, np.ndarray]:
    """Gradient of sum_i coef_i * yhat_i with respect to every head parameter."""

    coef = np.asarray(coef, dtype=np.float64)
    weights = params['weights'].astype(np.float64)
    features = transform_pooled(params, config, pooled)
    grads = {'weights': features.T @ coef, 'bias': np.array([coef.sum()])}

    if config.variant is Variant.SPECTRUM:
        aux_weights = weights[config.embedding_dim:]
        grads['projection'] = np.outer(aux_weights, pooled.spectral.T @ coef)
    elif config.use_layer_norm:
        z = _normalize_rows(pooled.base)
        grads['norm_scale'] = weights * (z.T @ coef)
        grads['norm_offset'] = weights * coef.sum()
    return grads


def l1_gradient(params: Dict[str, np.ndarray], config: HeadConfig, pooled: PooledInputs,
                labels) -> Dict[str, np.ndarray]:
    """Subgradient of the mean L1 loss over the given rows (sign of the residual, 0 at zero residual)."""
    labels = np.asarray(labels, dtype=np.float64)
    pred = predict_pooled(params, config, pooled)
    coef = np.sign(pred - labels) / labels.size
    return head_gradients(params, config, pooled, coef)


def assemble_features(inputs: HeadInputs, head: PredictorHead) -> np.ndarray:
    """Full feature vector the head's output layer sees for one utterance.

    plain: pooled embedding. compressed_pitch: pool over frames of [embedding | I(f_cent)/120 (| voicing)].
    pitch_histogram: [pooled embedding | P], layer-normalized with the head's affine when enabled.
    spectrum: pool over frames of [embedding | projection * scaled spectral frame] (see spectral_scale)."""
    return head.transform(pool_inputs(inputs, head.config))[0]


def forward(head: PredictorHead, features) -> float:
    """dot(weights, features) + bias, unclamped."""
    v = np.asarray(features, dtype=np.float64).ravel()
    if v.size != head.weights.size:
        raise ValueError(f'feature vector has {v.size} dims, head expects {head.weights.size}')
    return float(v @ head.weights.astype(np.float64) + float(head.bias[0]))


class HeadProblem(SGDProblem):

    def __init__(self, head: PredictorHead, train: PooledInputs, train_labels, val: PooledInputs, val_labels,
                 val_system_ids):
        super().__init__(train_labels, val_labels, val_system_ids)
        if train.n != self.n_train or val.n != self.val_labels.size:
            raise TrainingError('pooled inputs and labels have different lengths')
        self.head = head
        self.train = train
        self.val = val

    @property
    def params(self):
        return self.head.params

    def predict_train(self, idx):
        return self.head.predict(self.train.rows(idx))

    def predict_validation(self):
        return self.head.predict(self.val)

    def gradients(self, idx, coef):
        return head_gradients(self.head.params, self.head.config, self.train.rows(idx), coef)


def train_head(config: HeadConfig, train: PooledInputs, train_labels, val: PooledInputs, val_labels,
               val_system_ids, cfg: TrainConfig = TrainConfig()) -> Tuple[PredictorHead, TrainingLog]:
    """Train a head on pooled inputs by mini-batch L1 SGD with system-level SRCC checkpointing.

    The bias starts at the median training label (the best constant under L1). Returns the best-epoch head and the
    per-epoch log."""

    train_labels = np.asarray(train_labels, dtype=np.float64)
    if train_labels.size == 0:
        raise TrainingError('training split is empty')
    if train.base.shape[1] != config.base_dim:
        raise TrainingError(f'pooled features have {train.base.shape[1]} dims, config expects {config.base_dim}')

    head = PredictorHead.initial(config, bias=float(np.median(train_labels)))
    problem = HeadProblem(head, train, train_labels, val, val_labels, val_system_ids)
    log = run_sgd(problem, cfg, name=f'{config.variant.value} head')
    return head, log
