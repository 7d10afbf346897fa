
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import pandas as pd

from singqa.heads import PooledInputs, PredictorHead, forward
from singqa.records import MOS_MAX, MOS_MIN
from singqa.training import PARAM_DTYPE, SGDProblem, TrainConfig, TrainingLog, run_sgd

logger = logging.getLogger(__name__)

SEGMENT_WIDTH = 0.25
N_SEGMENTS = 16

BRANCH_VERSION = 1


def check_thresholds(alpha: float, beta: float):
    if not MOS_MIN < beta < alpha < MOS_MAX:
        raise ValueError(f'thresholds must satisfy {MOS_MIN} < beta < alpha < {MOS_MAX}, '
                         f'got alpha={alpha}, beta={beta}')


@dataclass(frozen=True)
class BiasConfig:
    alpha: float = 4.0
    beta: float = 2.0

    def __post_init__(self):
        check_thresholds(self.alpha, self.beta)


@dataclass(eq=False)
class BiasBranch:
    """Addition and subtraction branches attached in parallel to a head's output layer. Both read the same feature
    vector the head does; their outputs are unconstrained in sign."""

    alpha: float
    beta: float
    add_weights: np.ndarray
    add_bias: np.ndarray
    sub_weights: np.ndarray
    sub_bias: np.ndarray

    def __post_init__(self):
        check_thresholds(self.alpha, self.beta)
        self.alpha = float(self.alpha)
        self.beta = float(self.beta)
        self.add_weights = np.array(self.add_weights, dtype=PARAM_DTYPE).ravel()
        self.sub_weights = np.array(self.sub_weights, dtype=PARAM_DTYPE).ravel()
        self.add_bias = np.array(self.add_bias, dtype=PARAM_DTYPE).reshape(1)
        self.sub_bias = np.array(self.sub_bias, dtype=PARAM_DTYPE).reshape(1)
        if self.add_weights.size != self.sub_weights.size:
            raise ValueError('addition and subtraction branches must have the same width')

    @classmethod
    def zeros(cls, dim: int, alpha: float = BiasConfig.alpha, beta: float = BiasConfig.beta) -> 'BiasBranch':
        return cls(alpha, beta, np.zeros(dim), [0.0], np.zeros(dim), [0.0])

    @property
    def dim(self):
        return self.add_weights.size

    @property
    def params(self):
        return {'add_weights': self.add_weights, 'add_bias': self.add_bias,
                'sub_weights': self.sub_weights, 'sub_bias': self.sub_bias}

    def offsets(self, features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(b_a, b_s) for each row of features."""
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if features.shape[1] != self.dim:
            raise ValueError(f'feature vector has {features.shape[1]} dims, bias branch expects {self.dim}')
        b_a = features @ self.add_weights.astype(np.float64) + float(self.add_bias[0])
        b_s = features @ self.sub_weights.astype(np.float64) + float(self.sub_bias[0])
        return b_a, b_s

    def correct(self, y_hat: np.ndarray, features: np.ndarray) -> np.ndarray:
        b_a, b_s = self.offsets(features)
        return apply_bias_array(np.asarray(y_hat, dtype=np.float64), b_a, b_s, self.alpha, self.beta)


def apply_bias(y_hat: float, b_a: float, b_s: float, alpha: float = BiasConfig.alpha,
               beta: float = BiasConfig.beta) -> float:
    """y_hat + b_a above alpha, y_hat - b_s below beta, y_hat otherwise (the thresholds themselves included)."""
    check_thresholds(alpha, beta)
    if y_hat > alpha:
        return y_hat + b_a
    if y_hat < beta:
        return y_hat - b_s
    return y_hat


def apply_bias_array(y_hat: np.ndarray, b_a: np.ndarray, b_s: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    return np.where(y_hat > alpha, y_hat + b_a, np.where(y_hat < beta, y_hat - b_s, y_hat))


def forward_corrected(head: PredictorHead, branch: BiasBranch, features) -> float:
    """Base head score passed through the bias-correction stage."""
    y_hat = forward(head, features)
    b_a, b_s = branch.offsets(features)
    return apply_bias(y_hat, float(b_a[0]), float(b_s[0]), branch.alpha, branch.beta)


class BranchProblem(SGDProblem):
    """Trains only the branch parameters; the base head's scores and features are computed once."""

    def __init__(self, head: PredictorHead, branch: BiasBranch, train: PooledInputs, train_labels,
                 val: PooledInputs, val_labels, val_system_ids):
        super().__init__(train_labels, val_labels, val_system_ids)
        self.head = head
        self.branch = branch
        self.train_features = head.transform(train)
        self.train_yhat = head.predict(train)
        self.val_features = head.transform(val)
        self.val_yhat = head.predict(val)
        # Branch selection depends only on the frozen base score, so it is fixed for the whole run.
        self.add_mask = (self.train_yhat > branch.alpha).astype(np.float64)
        self.sub_mask = (self.train_yhat < branch.beta).astype(np.float64)

    @property
    def params(self):
        return self.branch.params

    @property
    def frozen(self):
        return self.head.params

    @property
    def active_rows(self):
        return int(np.count_nonzero(self.add_mask) + np.count_nonzero(self.sub_mask))

    def predict_train(self, idx):
        return self.branch.correct(self.train_yhat[idx], self.train_features[idx])

    def predict_validation(self):
        return self.branch.correct(self.val_yhat, self.val_features)

    def gradients(self, idx, coef):
        features = self.train_features[idx]
        add = coef * self.add_mask[idx]
        sub = -coef * self.sub_mask[idx]
        return {
            'add_weights': features.T @ add,
            'add_bias': np.array([add.sum()]),
            'sub_weights': features.T @ sub,
            'sub_bias': np.array([sub.sum()]),
        }


def train_bias_branch(head: PredictorHead, train: PooledInputs, train_labels, val: PooledInputs, val_labels,
                      val_system_ids, alpha: float = BiasConfig.alpha, beta: float = BiasConfig.beta,
                      cfg: TrainConfig = TrainConfig()) -> Tuple[BiasBranch, TrainingLog]:
    """Fit the addition/subtraction branches on L1 loss of the corrected score while the head stays frozen.

    Per example only the branch selected by the frozen score receives gradient. Checkpointing and early stopping
    follow the head trainer. If no training example reaches either outer branch, the zero branch is returned."""

    branch = BiasBranch.zeros(head.config.feature_dim, alpha, beta)
    problem = BranchProblem(head, branch, train, train_labels, val, val_labels, val_system_ids)

    if problem.active_rows == 0:
        logger.warning('No training score falls above alpha=%s or below beta=%s; returning a zero bias branch',
                       alpha, beta)
        return branch, TrainingLog()

    logger.info('Bias branch: %d training rows above alpha, %d below beta', int(problem.add_mask.sum()),
                int(problem.sub_mask.sum()))
    log = run_sgd(problem, cfg, name='bias branch')
    return branch, log


def segment_mse(predictions, labels) -> pd.DataFrame:
    """MSE per label segment of width 0.25 over [1, 5] (16 segments, the last one closed at 5).
    Empty segments have count 0 and a NaN mse."""

    p = np.asarray(predictions, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.size != y.size:
        raise ValueError(f'prediction and label lengths differ: {p.size} vs {y.size}')
    if np.any((y < MOS_MIN) | (y > MOS_MAX)):
        raise ValueError(f'segment labels must lie in [{MOS_MIN}, {MOS_MAX}]')

    segment = np.minimum(np.floor((y - MOS_MIN) / SEGMENT_WIDTH).astype(np.int64), N_SEGMENTS - 1)
    counts = np.bincount(segment, minlength=N_SEGMENTS)
    sums = np.bincount(segment, weights=(p - y) ** 2, minlength=N_SEGMENTS)
    with np.errstate(invalid='ignore', divide='ignore'):
        values = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)

    lo = MOS_MIN + SEGMENT_WIDTH * np.arange(N_SEGMENTS)
    return pd.DataFrame({
        'segment_lo': lo,
        'segment_hi': lo + SEGMENT_WIDTH,
        'count': counts,
        'mse': values,
    })


def low_segment_mse(table: pd.DataFrame, beta: float) -> float:
    """Aggregate MSE over the populated segments lying entirely below beta (count-weighted)."""
    below = table[(table['segment_hi'] <= beta) & (table['count'] > 0)]
    if below.empty:
        return float('nan')
    return float((below['mse'] * below['count']).sum() / below['count'].sum())
