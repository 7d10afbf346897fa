
import math

import numpy as np
import pytest

from singqa.errors import TrainingError
from singqa.fusion import FusionModel, fuse_forward, rank_predictors, train_combiner
from singqa.metrics import LevelMetrics, MetricReport
from singqa.training import TrainConfig


def _report(sys_srcc, sys_mse):
    level = LevelMetrics(mse=sys_mse, lcc=0.0, srcc=sys_srcc, ktau=0.0)
    return MetricReport(utterance=level, system=level, n_utterances=10, n_systems=5)


def test_tie_on_srcc_goes_to_the_lower_mse():
    reports = [('wav2vec', _report(0.939, 0.241)), ('ps_sqa', _report(0.939, 0.036)), ('base', _report(0.88, 0.01))]
    assert rank_predictors(reports, k=3) == ['ps_sqa', 'wav2vec', 'base']
    assert rank_predictors(reports, k=1) == ['ps_sqa']


def test_full_ties_go_to_the_smaller_id_and_nan_ranks_last():
    reports = [('b', _report(0.5, 0.1)), ('a', _report(0.5, 0.1)), ('c', _report(math.nan, 0.0))]
    assert rank_predictors(reports, k=3) == ['a', 'b', 'c']


def test_ranking_preconditions():
    reports = [('a', _report(0.5, 0.1))]
    with pytest.raises(ValueError):
        rank_predictors(reports, k=2)
    with pytest.raises(ValueError):
        rank_predictors(reports, k=0)
    with pytest.raises(ValueError):
        rank_predictors(reports * 2, k=1)


def test_fuse_forward(rng):
    scores = rng.uniform(1, 5, size=4)
    assert fuse_forward(scores, FusionModel.uniform(['a', 'b', 'c', 'd'])) == pytest.approx(scores.mean())
    assert fuse_forward(scores, FusionModel(['a', 'b', 'c', 'd'], [0, 0, 1, 0], [0])) == scores[2]
    for trial in range(20):
        weights, bias = rng.normal(size=4), rng.normal()
        model = FusionModel(['a', 'b', 'c', 'd'], weights, [bias])
        expected = sum(float(w) * s for w, s in zip(model.combiner_weights, scores)) + float(model.combiner_bias[0])
        assert fuse_forward(scores, model) == pytest.approx(expected, abs=1e-9)
    with pytest.raises(ValueError):
        fuse_forward(scores[:3], model)


def test_model_validation():
    with pytest.raises(TrainingError):
        FusionModel.uniform([])
    with pytest.raises(ValueError):
        FusionModel(['a', 'a'], [0.5, 0.5])
    with pytest.raises(ValueError):
        FusionModel(['a', 'b'], [1.0])


def _member_set(seed, per_system, sigmas):
    rng = np.random.default_rng(seed)
    systems = np.repeat([f'sys{i}' for i in range(10)], per_system)
    labels = np.repeat(2.0 + 0.2 * np.arange(10), per_system) + rng.uniform(-0.05, 0.05, size=systems.size)
    scores = np.column_stack([labels + rng.normal(0.0, s, size=labels.size) for s in sigmas])
    return scores, labels, list(systems)


def _l1(pred, labels):
    return float(np.mean(np.abs(pred - labels)))


def test_combiner_is_no_worse_than_its_best_member():
    sigmas = (0.1, 0.2, 0.3)
    train_scores, train_labels, _ = _member_set(0, 40, sigmas)
    val_scores, val_labels, val_systems = _member_set(1, 20, sigmas)

    model, log = train_combiner(['m1', 'm2', 'm3'], train_scores, train_labels, val_scores, val_labels, val_systems,
                                TrainConfig(learning_rate=0.002, max_epochs=400))

    best_member = min(_l1(val_scores[:, j], val_labels) for j in range(3))
    assert _l1(model.predict(val_scores), val_labels) <= best_member + 1e-6
    assert model.combiner_weights[0] > model.combiner_weights[2]
    assert log.best is not None


def test_exact_member_dominates():
    train_scores, train_labels, _ = _member_set(2, 40, (0.0, 0.3))
    val_scores, val_labels, val_systems = _member_set(3, 20, (0.0, 0.3))

    model, _ = train_combiner(['exact', 'noisy'], train_scores, train_labels, val_scores, val_labels, val_systems,
                              TrainConfig(learning_rate=0.005, max_epochs=300))
    assert _l1(model.predict(val_scores), val_labels) < 0.05
    assert model.combiner_weights[0] > model.combiner_weights[1]


def test_identical_members():
    train_scores, train_labels, _ = _member_set(4, 20, (0.2,))
    val_scores, val_labels, val_systems = _member_set(5, 10, (0.2,))
    single = _l1(val_scores[:, 0], val_labels)

    model, _ = train_combiner(['a', 'b'], np.repeat(train_scores, 2, axis=1), train_labels,
                              np.repeat(val_scores, 2, axis=1), val_labels, val_systems,
                              TrainConfig(learning_rate=0.001, max_epochs=100))
    assert _l1(model.predict(np.repeat(val_scores, 2, axis=1)), val_labels) <= single + 1e-6


def test_combiner_starts_uniform():
    model = FusionModel.uniform(['a', 'b', 'c'])
    np.testing.assert_allclose(model.combiner_weights, 1 / 3)
    assert model.combiner_bias[0] == 0.0


def test_fused_score_is_monotone_for_non_negative_weights(rng):
    for trial in range(50):
        model = FusionModel(['a', 'b', 'c'], rng.uniform(0.0, 1.0, size=3), [rng.normal()])
        scores = rng.uniform(1, 5, size=3)
        j = trial % 3
        raised = scores.copy()
        raised[j] += rng.uniform(0.0, 2.0)
        assert fuse_forward(raised, model) >= fuse_forward(scores, model)


def _calibrated_member(seed, per_system):
    """A member whose scores are unbiased predictions of the labels."""
    rng = np.random.default_rng(seed)
    systems = np.repeat([f'sys{i}' for i in range(10)], per_system)
    scores = np.repeat(1.5 + 0.3 * np.arange(10), per_system) + rng.uniform(-0.2, 0.2, size=systems.size)
    labels = scores + rng.normal(0.0, 0.1, size=scores.size)
    return scores[:, None], labels, list(systems)


def test_single_unbiased_member_keeps_identity_weights():
    train_scores, train_labels, _ = _calibrated_member(6, 20)
    val_scores, val_labels, val_systems = _calibrated_member(7, 10)

    model, _ = train_combiner(['only'], train_scores, train_labels, val_scores, val_labels, val_systems,
                              TrainConfig(learning_rate=0.002, max_epochs=200))
    assert model.combiner_weights[0] == pytest.approx(1.0, abs=0.1)
    assert model.combiner_bias[0] == pytest.approx(0.0, abs=0.3)

    exact, log = train_combiner(['only'], val_scores, val_scores[:, 0], val_scores, val_scores[:, 0], val_systems)
    assert (float(exact.combiner_weights[0]), float(exact.combiner_bias[0])) == (1.0, 0.0)
    assert log.records[0].val_l1 == 0.0
