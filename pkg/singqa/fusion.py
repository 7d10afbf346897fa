
import logging
import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from singqa.errors import TrainingError
from singqa.metrics import MetricReport
from singqa.training import PARAM_DTYPE, SGDProblem, TrainConfig, TrainingLog, run_sgd

logger = logging.getLogger(__name__)

DEFAULT_TOP_K = 5


@dataclass(eq=False)
class FusionModel:
    member_ids: List[str]
    combiner_weights: np.ndarray
    combiner_bias: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=PARAM_DTYPE))

    def __post_init__(self):
        self.member_ids = [str(m) for m in self.member_ids]
        self.combiner_weights = np.array(self.combiner_weights, dtype=PARAM_DTYPE).ravel()
        self.combiner_bias = np.array(self.combiner_bias, dtype=PARAM_DTYPE).reshape(1)
        if not self.member_ids:
            raise ValueError('a fusion model needs at least one member')
        if len(set(self.member_ids)) != len(self.member_ids):
            raise ValueError('fusion member ids must be unique')
        if self.combiner_weights.size != self.k:
            raise ValueError(f'{self.k} members but {self.combiner_weights.size} combiner weights')

    @classmethod
    def uniform(cls, member_ids: Sequence[str]) -> 'FusionModel':
        k = len(member_ids)
        if k == 0:
            raise TrainingError('fusion needs at least one member')
        return cls(list(member_ids), np.full(k, 1.0 / k), [0.0])

    @property
    def k(self):
        return len(self.member_ids)

    @property
    def params(self):
        return {'combiner_weights': self.combiner_weights, 'combiner_bias': self.combiner_bias}

    def predict(self, member_scores: np.ndarray) -> np.ndarray:
        """Fused scores for an (n, k) matrix of member scores."""
        scores = np.atleast_2d(np.asarray(member_scores, dtype=np.float64))
        if scores.shape[1] != self.k:
            raise ValueError(f'{scores.shape[1]} member scores for a {self.k}-member fusion model')
        return scores @ self.combiner_weights.astype(np.float64) + float(self.combiner_bias[0])

    def __repr__(self):
        weights = ', '.join(f'{m}={w:.3f}' for m, w in zip(self.member_ids, self.combiner_weights))
        return f'FusionModel({weights}; bias={float(self.combiner_bias[0]):.3f})'


def _ranking_key(item: Tuple[str, MetricReport]):
    predictor_id, report = item
    srcc = report.system.srcc
    mse = report.system.mse
    return (
        math.inf if math.isnan(srcc) else -srcc,
        math.inf if math.isnan(mse) else mse,
        predictor_id,
    )


def rank_predictors(reports: Sequence[Tuple[str, MetricReport]], k: int = DEFAULT_TOP_K) -> List[str]:
    """Top-k predictor ids by validation system-level SRCC (descending); ties go to the lower system-level MSE, then
    the lexicographically smaller id."""

    reports = list(reports)
    if k < 1:
        raise ValueError(f'k must be at least 1, got {k}')
    if k > len(reports):
        raise ValueError(f'asked for the top {k} predictors but only {len(reports)} are available')
    ids = [predictor_id for predictor_id, _ in reports]
    if len(set(ids)) != len(ids):
        raise ValueError('predictor ids must be unique')
    return [predictor_id for predictor_id, _ in sorted(reports, key=_ranking_key)[:k]]


def fuse_forward(member_scores, model: FusionModel) -> float:
    """dot(combiner_weights, member_scores) + combiner_bias."""
    scores = np.asarray(member_scores, dtype=np.float64).ravel()
    if scores.size != model.k:
        raise ValueError(f'{scores.size} member scores for a {model.k}-member fusion model')
    return float(model.predict(scores[None, :])[0])


class CombinerProblem(SGDProblem):

    def __init__(self, model: FusionModel, train_scores, train_labels, val_scores, val_labels, val_system_ids):
        super().__init__(train_labels, val_labels, val_system_ids)
        self.model = model
        self.train_scores = np.asarray(train_scores, dtype=np.float64)
        self.val_scores = np.asarray(val_scores, dtype=np.float64)
        if self.train_scores.shape != (self.n_train, model.k):
            raise TrainingError(f'training member scores must be {self.n_train}x{model.k}, '
                                f'got {self.train_scores.shape}')
        if self.val_scores.shape != (self.val_labels.size, model.k):
            raise TrainingError(f'validation member scores must be {self.val_labels.size}x{model.k}, '
                                f'got {self.val_scores.shape}')

    @property
    def params(self):
        return self.model.params

    def predict_train(self, idx):
        return self.model.predict(self.train_scores[idx])

    def predict_validation(self):
        return self.model.predict(self.val_scores)

    def gradients(self, idx, coef):
        return {
            'combiner_weights': self.train_scores[idx].T @ coef,
            'combiner_bias': np.array([coef.sum()]),
        }


def train_combiner(member_ids: Sequence[str], train_scores, train_labels, val_scores, val_labels, val_system_ids,
                   cfg: TrainConfig = TrainConfig()) -> Tuple[FusionModel, TrainingLog]:
    """Train the linear combiner over frozen member predictions (columns ordered as member_ids).
    Starts from uniform weights 1/k and zero bias."""

    if not member_ids:
        raise TrainingError('fusion needs at least one member')
    model = FusionModel.uniform(member_ids)
    problem = CombinerProblem(model, train_scores, train_labels, val_scores, val_labels, val_system_ids)
    log = run_sgd(problem, cfg, name='combiner')
    logger.info('Trained %r', model)
    return model, log
