
import logging
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import stats

logger = logging.getLogger(__name__)

METRIC_NAMES = ('mse', 'lcc', 'srcc', 'ktau')
REPORT_COLUMNS = ('utt_mse', 'utt_lcc', 'utt_srcc', 'utt_ktau', 'sys_mse', 'sys_lcc', 'sys_srcc', 'sys_ktau')

# Degenerate correlations (constant input, fewer than two points) are reported as this marker.
DEGENERATE = float('nan')


def _pair(pred, label):
    p = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(label, dtype=np.float64).ravel()
    if p.size != y.size:
        raise ValueError(f'prediction and label lengths differ: {p.size} vs {y.size}')
    if p.size == 0:
        raise ValueError('metrics need at least one prediction/label pair')
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(y))):
        raise ValueError('predictions and labels must be finite')
    return p, y


def _degenerate(p: np.ndarray, y: np.ndarray) -> bool:
    return p.size < 2 or np.ptp(p) == 0 or np.ptp(y) == 0


def _clip(value: float) -> float:
    return float(np.clip(value, -1.0, 1.0))


def mse(pred, label) -> float:
    p, y = _pair(pred, label)
    return float(np.mean((p - y) ** 2))


def lcc(pred, label) -> float:
    """Pearson linear correlation; NaN when either vector is constant."""
    p, y = _pair(pred, label)
    if _degenerate(p, y):
        return DEGENERATE
    return _clip(stats.pearsonr(p, y)[0])


def srcc(pred, label) -> float:
    """Spearman rank correlation (Pearson over average ranks); NaN when either vector is constant."""
    p, y = _pair(pred, label)
    if _degenerate(p, y):
        return DEGENERATE
    return _clip(stats.spearmanr(p, y)[0])


def ktau(pred, label) -> float:
    """Kendall tau-b; NaN when every pair is tied in either vector."""
    p, y = _pair(pred, label)
    if _degenerate(p, y):
        return DEGENERATE
    return _clip(stats.kendalltau(p, y, variant='b')[0])


class SystemGrouping:
    """Precomputed utterance -> system mapping, used wherever per-system means are taken repeatedly."""

    def __init__(self, system_ids: Sequence[str]):
        ids = np.asarray([str(s) for s in system_ids])
        if ids.size == 0:
            raise ValueError('system grouping needs at least one utterance')
        self.systems, self.index = np.unique(ids, return_inverse=True)  # Sorted by system id
        self.counts = np.bincount(self.index, minlength=self.systems.size).astype(np.float64)

    @property
    def n_systems(self):
        return self.systems.size

    def __len__(self):
        return self.index.size

    def means(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64)
        if v.size != self.index.size:
            raise ValueError(f'{v.size} values for {self.index.size} grouped utterances')
        return np.bincount(self.index, weights=v, minlength=self.systems.size) / self.counts


def system_aggregate(predictions, labels, system_ids) -> pd.DataFrame:
    """Per-system mean prediction and mean label, one row per system ordered by system id."""
    p, y = _pair(predictions, labels)
    grouping = SystemGrouping(system_ids)
    if len(grouping) != p.size:
        raise ValueError(f'{len(grouping)} system ids for {p.size} predictions')
    return pd.DataFrame(
        {'mean_pred': grouping.means(p), 'mean_label': grouping.means(y)},
        index=pd.Index(grouping.systems, name='system_id'),
    )


def system_srcc(predictions, labels, grouping: SystemGrouping) -> float:
    """System-level SRCC, the checkpoint and ranking criterion."""
    return srcc(grouping.means(predictions), grouping.means(labels))


@dataclass(frozen=True)
class LevelMetrics:
    mse: float
    lcc: float
    srcc: float
    ktau: float

    @classmethod
    def compute(cls, pred, label) -> 'LevelMetrics':
        return cls(mse=mse(pred, label), lcc=lcc(pred, label), srcc=srcc(pred, label), ktau=ktau(pred, label))


@dataclass(frozen=True)
class MetricReport:
    utterance: LevelMetrics
    system: LevelMetrics
    n_utterances: int
    n_systems: int

    def as_row(self) -> dict:
        """Flat mapping in the fixed CSV column order."""
        row = {}
        for prefix, level in (('utt', self.utterance), ('sys', self.system)):
            for name, value in asdict(level).items():
                row[f'{prefix}_{name}'] = value
        return {column: row[column] for column in REPORT_COLUMNS}

    def to_frame(self) -> pd.DataFrame:
        """Two-row table (utterance, system) by four metric columns."""
        return pd.DataFrame(
            [asdict(self.utterance), asdict(self.system)],
            index=pd.Index(['utterance', 'system'], name='level'),
            columns=list(METRIC_NAMES),
        )

    def __repr__(self):
        return f'MetricReport({self.n_utterances} utterances, {self.n_systems} systems)\n{self.to_frame()}'


def full_report(predictions, labels, system_ids) -> MetricReport:
    """Utterance-level metrics over the raw pairs and system-level metrics over per-system means."""
    p, y = _pair(predictions, labels)
    grouping = SystemGrouping(system_ids)
    if len(grouping) != p.size:
        raise ValueError(f'{len(grouping)} system ids for {p.size} predictions')
    if grouping.n_systems < 2:
        logger.warning('Only one system present; system-level correlations are degenerate')

    report = MetricReport(
        utterance=LevelMetrics.compute(p, y),
        system=LevelMetrics.compute(grouping.means(p), grouping.means(y)),
        n_utterances=int(p.size),
        n_systems=int(grouping.n_systems),
    )
    return report


def write_report_csv(report: MetricReport, path) -> None:
    pd.DataFrame([report.as_row()], columns=list(REPORT_COLUMNS)).to_csv(path, index=False)


def read_report_csv(path) -> dict:
    frame = pd.read_csv(path, float_precision='round_trip')
    return {column: float(frame[column].iloc[0]) for column in REPORT_COLUMNS}
