
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd

from singqa.errors import ManifestError

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ('utt_id', 'system_id', 'wav_path', 'mos', 'emb_path', 'spec_path', 'pitch_path')

# Manifest column -> feature kind name used in UtteranceRecord.feature_paths
FEATURE_COLUMNS = {'emb_path': 'embedding', 'spec_path': 'spectral', 'pitch_path': 'pitch'}

MOS_MIN = 1.0
MOS_MAX = 5.0


@dataclass(frozen=True)
class UtteranceRecord:
    utt_id: str
    system_id: str
    wav_path: Optional[Path] = None
    feature_paths: Dict[str, Path] = field(default_factory=dict)
    mos_label: Optional[float] = None

    def __post_init__(self):
        if not self.utt_id:
            raise ManifestError('utt_id must not be empty')
        if self.mos_label is not None and not MOS_MIN <= self.mos_label <= MOS_MAX:
            raise ManifestError(f'mos label {self.mos_label} of {self.utt_id!r} is outside [{MOS_MIN}, {MOS_MAX}]')
        if self.wav_path is None and not self.feature_paths:
            raise ManifestError(f'{self.utt_id!r} has neither a wav_path nor any feature path')

    @property
    def has_label(self):
        return self.mos_label is not None

    def feature_path(self, kind: str) -> Path:
        """Return the path of the requested feature kind, or raise if the manifest row does not provide it."""
        try:
            return self.feature_paths[kind]
        except KeyError:
            raise ManifestError(f'{self.utt_id!r} has no {kind} feature path') from None

    def with_feature(self, kind: str, path: Path) -> 'UtteranceRecord':
        paths = dict(self.feature_paths)
        paths[kind] = Path(path)
        return UtteranceRecord(self.utt_id, self.system_id, self.wav_path, paths, self.mos_label)

    def __repr__(self):
        label = f'{self.mos_label:.3f}' if self.has_label else 'unlabeled'
        return f'{self.utt_id} [{self.system_id}] {label}'


def _cell(value) -> Optional[str]:
    """Empty manifest cells come out of pandas as NaN or blank strings; both mean absent."""
    if value is None:
        return None
    if isinstance(value, float) and math.isnan(value):
        return None
    text = str(value).strip()
    return text or None


def _resolve(base_dir: Path, value: Optional[str]) -> Optional[Path]:
    if value is None:
        return None
    path = Path(value)
    return path if path.is_absolute() else base_dir / path


def load_manifest(path) -> List[UtteranceRecord]:
    """Read a manifest CSV and return one UtteranceRecord per data row, in file order. Relative paths inside the
    manifest are resolved against the manifest's own directory."""

    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f'Manifest not found: {path}')

    try:
        # Everything is read as text so ids like "007" survive; mos is parsed per row below.
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise ManifestError(f'{path} is not a readable manifest CSV: {exc}') from exc

    missing = [c for c in ('utt_id', 'system_id') if c not in frame.columns]
    if missing:
        raise ManifestError(f'{path} is missing required columns: {", ".join(missing)}')
    unknown = [c for c in frame.columns if c not in MANIFEST_COLUMNS]
    if unknown:
        logger.warning('Ignoring unknown manifest columns in %s: %s', path, ', '.join(unknown))

    base_dir = path.parent
    records = []
    seen = {}

    for i, row in enumerate(frame.to_dict('records')):
        row_number = i + 1  # 1-based data row, header excluded
        utt_id = _cell(row.get('utt_id'))
        system_id = _cell(row.get('system_id'))
        if utt_id is None or system_id is None:
            raise ManifestError('utt_id and system_id are required', row=row_number)
        if utt_id in seen:
            raise ManifestError(f'duplicate utt_id {utt_id!r} (first seen in row {seen[utt_id]})', row=row_number)
        seen[utt_id] = row_number

        mos_text = _cell(row.get('mos'))
        mos = None
        if mos_text is not None:
            try:
                mos = float(mos_text)
            except ValueError:
                raise ManifestError(f'mos value {mos_text!r} is not a number', row=row_number) from None
            if not math.isfinite(mos) or not MOS_MIN <= mos <= MOS_MAX:
                raise ManifestError(f'mos value {mos} is outside [{MOS_MIN}, {MOS_MAX}]', row=row_number)

        feature_paths = {}
        for column, kind in FEATURE_COLUMNS.items():
            resolved = _resolve(base_dir, _cell(row.get(column)))
            if resolved is not None:
                feature_paths[kind] = resolved

        try:
            record = UtteranceRecord(
                utt_id=utt_id,
                system_id=system_id,
                wav_path=_resolve(base_dir, _cell(row.get('wav_path'))),
                feature_paths=feature_paths,
                mos_label=mos,
            )
        except ManifestError as exc:
            raise ManifestError(str(exc), row=row_number) from None
        records.append(record)

    logger.debug('Loaded %d manifest rows from %s', len(records), path)
    return records


def _absolute(path: Optional[Path]) -> str:
    return str(Path(path).absolute()) if path is not None else ''


def write_manifest(records: List[UtteranceRecord], path) -> None:
    """Write records back in the manifest CSV format (absolute paths, empty cells for absent values)."""

    rows = []
    for record in records:
        rows.append({
            'utt_id': record.utt_id,
            'system_id': record.system_id,
            'wav_path': _absolute(record.wav_path),
            'mos': repr(record.mos_label) if record.has_label else '',
            'emb_path': _absolute(record.feature_paths.get('embedding')),
            'spec_path': _absolute(record.feature_paths.get('spectral')),
            'pitch_path': _absolute(record.feature_paths.get('pitch')),
        })
    pd.DataFrame(rows, columns=list(MANIFEST_COLUMNS)).to_csv(path, index=False)


def labels_of(records: List[UtteranceRecord]) -> List[float]:
    unlabeled = [r.utt_id for r in records if not r.has_label]
    if unlabeled:
        raise ManifestError(f'{len(unlabeled)} utterances have no mos label (first: {unlabeled[0]!r})')
    return [r.mos_label for r in records]
