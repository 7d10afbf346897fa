
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List

import numpy as np

from singqa.errors import ManifestError
from singqa.features import FeatureKind, read_feature_file
from singqa.heads import HeadConfig, HeadInputs, PooledInputs, Variant, pool_inputs
from singqa.pitch import PitchTrack
from singqa.records import UtteranceRecord, labels_of

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PooledDataset:
    utt_ids: List[str]
    system_ids: List[str]
    pooled: PooledInputs
    labels: np.ndarray  # NaN where the manifest row has no label

    def __len__(self):
        return len(self.utt_ids)

    @property
    def has_labels(self):
        return not np.any(np.isnan(self.labels))


def load_head_inputs(record: UtteranceRecord, variant: Variant) -> HeadInputs:
    """Read the feature files one utterance needs for the given head variant."""

    embedding = read_feature_file(record.feature_path('embedding'))
    if embedding.kind is not FeatureKind.EMBEDDING:
        raise ManifestError(f'{record.utt_id!r}: emb_path holds {embedding.kind.label} features')

    pitch = spectral = None
    if variant.needs_pitch:
        pitch = PitchTrack.from_feature_sequence(read_feature_file(record.feature_path('pitch')))
    if variant.needs_spectral:
        spectral = read_feature_file(record.feature_path('spectral'))
        if spectral.kind is not FeatureKind.SPECTRAL:
            raise ManifestError(f'{record.utt_id!r}: spec_path holds {spectral.kind.label} features')
    return HeadInputs(embedding=embedding, pitch=pitch, spectral=spectral)


def input_dims(record: UtteranceRecord, variant: Variant):
    """(embedding_dim, raw spectral dim) from the first record, used to size a new head."""
    inputs = load_head_inputs(record, variant)
    return inputs.embedding.dims, (inputs.spectral.dims if inputs.spectral is not None else 0)


def _pool_record(record: UtteranceRecord, config: HeadConfig) -> PooledInputs:
    try:
        return pool_inputs(load_head_inputs(record, config.variant), config)
    except (ValueError, FileNotFoundError) as exc:
        raise type(exc)(f'{record.utt_id}: {exc}') from exc


def build_dataset(records: List[UtteranceRecord], config: HeadConfig, jobs: int = 1,
                  require_labels: bool = True) -> PooledDataset:
    """Load and pool every record for a head configuration. File reads fan out over a thread pool; results keep
    manifest order."""

    if not records:
        raise ManifestError('manifest has no rows')
    if require_labels:
        labels = np.asarray(labels_of(records), dtype=np.float64)
    else:
        labels = np.asarray([r.mos_label if r.has_label else np.nan for r in records], dtype=np.float64)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs, thread_name_prefix='pooling') as pool:
            pooled = list(pool.map(lambda r: _pool_record(r, config), records))
    else:
        pooled = [_pool_record(r, config) for r in records]

    logger.debug('Pooled %d utterances for the %s head', len(records), config.variant.value)
    return PooledDataset(
        utt_ids=[r.utt_id for r in records],
        system_ids=[r.system_id for r in records],
        pooled=PooledInputs.stack(pooled),
        labels=labels,
    )
