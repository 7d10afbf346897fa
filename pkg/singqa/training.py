
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from singqa.errors import TrainingError
from singqa.metrics import SystemGrouping, system_srcc

logger = logging.getLogger(__name__)

PARAM_DTYPE = np.float32

LOG_COLUMNS = ('epoch', 'train_l1', 'val_srcc_system', 'val_l1')


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.0001
    batch_size: int = 4
    max_epochs: int = 1000
    early_stop_patience: int = 15
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f'learning_rate must be positive, got {self.learning_rate}')
        for name in ('batch_size', 'max_epochs', 'early_stop_patience'):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f'{name} must be a positive integer, got {value}')
        if self.seed < 0:
            raise ValueError(f'seed must be non-negative, got {self.seed}')


def l1_loss(pred, labels) -> float:
    return float(np.mean(np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(labels, dtype=np.float64))))


def l1_coefficients(pred: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(mean |pred - y|) / d(pred): sign of the residual over the batch size, 0 where the residual is 0."""
    return np.sign(pred - labels) / pred.size


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_l1: float
    val_srcc_system: float
    val_l1: float

    @property
    def checkpoint_key(self):
        return checkpoint_key(self.val_srcc_system, self.val_l1)


def checkpoint_key(val_srcc: float, val_l1: float):
    """Higher is better: system SRCC first (NaN ranks below any value), then lower validation L1."""
    return (-math.inf if math.isnan(val_srcc) else val_srcc, -val_l1)


@dataclass
class TrainingLog:
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    stopped_early: bool = False

    def append(self, record: EpochRecord):
        self.records.append(record)

    @property
    def best(self) -> Optional[EpochRecord]:
        for record in self.records:
            if record.epoch == self.best_epoch:
                return record
        return None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(r) for r in self.records], columns=list(LOG_COLUMNS))

    def write_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    def __len__(self):
        return len(self.records)


class SGDProblem(ABC):
    """A model trained by mini-batch L1 subgradient descent. Subclasses own a dict of float32 parameter arrays that
    the trainer updates in place, and know how to predict and differentiate on training rows."""

    def __init__(self, train_labels, val_labels, val_system_ids):
        self.train_labels = np.asarray(train_labels, dtype=np.float64)
        self.val_labels = np.asarray(val_labels, dtype=np.float64)
        if self.train_labels.size == 0:
            raise TrainingError('training split is empty')
        if self.val_labels.size == 0:
            raise TrainingError('validation split is empty')
        self.val_grouping = SystemGrouping(val_system_ids)
        if len(self.val_grouping) != self.val_labels.size:
            raise TrainingError(f'{len(self.val_grouping)} validation system ids for {self.val_labels.size} labels')
        if self.val_grouping.n_systems < 2:
            raise TrainingError('validation split has a single system; system-level SRCC needs at least two')

    @property
    def n_train(self):
        return self.train_labels.size

    @property
    @abstractmethod
    def params(self) -> Dict[str, np.ndarray]:
        """Trainable parameters, float32, updated in place."""

    @property
    def frozen(self) -> Dict[str, np.ndarray]:
        """Parameters that must not change during training (checked after every run)."""
        return {}

    @abstractmethod
    def predict_train(self, idx: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def predict_validation(self) -> np.ndarray:
        pass

    @abstractmethod
    def gradients(self, idx: np.ndarray, coef: np.ndarray) -> Dict[str, np.ndarray]:
        """Gradient of sum_i coef_i * pred_i over the rows idx, for every trainable parameter."""


def _snapshot(params: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {name: value.copy() for name, value in params.items()}


def run_sgd(problem: SGDProblem, cfg: TrainConfig, name: str = 'model') -> TrainingLog:
    """Plain mini-batch SGD (no momentum, no weight decay) on mean L1 loss.

    The untrained state is logged as epoch 0. After every epoch the validation system-level SRCC is computed, and
    the parameters of the best logged epoch (see checkpoint_key) are restored into the problem at the end. Training
    stops after early_stop_patience epochs without improvement, or at max_epochs. An epoch that ties the best SRCC
    with a lower validation L1 counts as an improvement and resets the patience counter. Non-finite predictions
    raise TrainingError. Shuffling uses a generator seeded from cfg.seed, so identical inputs give bit-identical
    logs."""

    rng = np.random.default_rng(cfg.seed)
    params = problem.params
    frozen_before = _snapshot(problem.frozen)
    everything = np.arange(problem.n_train)
    lr = PARAM_DTYPE(cfg.learning_rate)
    log = TrainingLog()

    def evaluate(epoch: int) -> EpochRecord:
        train_pred = problem.predict_train(everything)
        val_pred = problem.predict_validation()
        if not (np.all(np.isfinite(train_pred)) and np.all(np.isfinite(val_pred))):
            raise TrainingError(f'{name} diverged at epoch {epoch} (non-finite predictions); '
                                f'lower the learning rate (now {cfg.learning_rate})')
        record = EpochRecord(
            epoch=epoch,
            train_l1=l1_loss(train_pred, problem.train_labels),
            val_srcc_system=system_srcc(val_pred, problem.val_labels, problem.val_grouping),
            val_l1=l1_loss(val_pred, problem.val_labels),
        )
        log.append(record)
        logger.debug('%s epoch %d: train L1 %.5f, val SRCC %.4f, val L1 %.5f', name, epoch, record.train_l1,
                     record.val_srcc_system, record.val_l1)
        return record

    best_key = evaluate(0).checkpoint_key
    best_params = _snapshot(params)
    log.best_epoch = 0
    stale = 0

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(problem.n_train)

        for start in range(0, problem.n_train, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            coef = l1_coefficients(problem.predict_train(idx), problem.train_labels[idx])
            if not np.any(coef):
                continue
            with np.errstate(over='ignore', invalid='ignore'):  # Divergence is reported by evaluate
                for key, grad in problem.gradients(idx, coef).items():
                    params[key] -= lr * grad.astype(PARAM_DTYPE)

        record = evaluate(epoch)
        if record.checkpoint_key > best_key:
            best_key = record.checkpoint_key
            best_params = _snapshot(params)
            log.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                log.stopped_early = True
                logger.info('%s: early stop at epoch %d (no improvement for %d epochs)', name, epoch, stale)
                break

    for key, value in best_params.items():
        params[key][...] = value

    for key, value in frozen_before.items():
        if not np.array_equal(problem.frozen[key], value):
            raise TrainingError(f'frozen parameter {key!r} changed during training')

    best = log.best
    if math.isnan(best.val_srcc_system):
        logger.warning('%s: validation system SRCC is degenerate at every epoch; checkpoint chosen by val L1', name)
    logger.info('%s: best epoch %d of %d, val system SRCC %.4f, val L1 %.4f', name, best.epoch, cfg.max_epochs,
                best.val_srcc_system, best.val_l1)
    return log
