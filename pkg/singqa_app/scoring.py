
import logging
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from singqa.datasets import PooledDataset, build_dataset
from singqa.model_io import load_fusion, load_head, model_kind
from singqa.records import UtteranceRecord

logger = logging.getLogger(__name__)


def head_scores(model_path, records: List[UtteranceRecord], jobs: int = 1,
                require_labels: bool = False) -> (np.ndarray, PooledDataset):
    """Scores of one head model file on a manifest; bias-corrected when the file carries a branch."""
    head, branch = load_head(model_path)
    dataset = build_dataset(records, head.config, jobs=jobs, require_labels=require_labels)
    scores = head.predict(dataset.pooled)
    if branch is not None:
        scores = branch.correct(scores, head.transform(dataset.pooled))
    return scores, dataset


def member_score_matrix(member_paths: Dict[str, Path], member_ids: Sequence[str], records: List[UtteranceRecord],
                        jobs: int = 1) -> np.ndarray:
    """(n, k) member predictions, columns in member_ids order. Members are frozen; each is scored once."""
    columns = []
    for member_id in member_ids:
        scores, _ = head_scores(member_paths[member_id], records, jobs=jobs)
        columns.append(scores)
    return np.stack(columns, axis=1)


def model_scores(model_path, records: List[UtteranceRecord], jobs: int = 1) -> np.ndarray:
    """Raw scores of a head or fusion model file on a manifest."""
    kind = model_kind(model_path)
    if kind == 'fusion':
        model, member_paths = load_fusion(model_path)
        return model.predict(member_score_matrix(member_paths, model.member_ids, records, jobs=jobs))
    scores, _ = head_scores(model_path, records, jobs=jobs)
    return scores
