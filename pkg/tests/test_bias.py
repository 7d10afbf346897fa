
import logging
import math

import numpy as np
import pytest

from singqa.bias import (BiasBranch, apply_bias, apply_bias_array, forward_corrected, low_segment_mse, segment_mse,
                         train_bias_branch)
from singqa.heads import HeadConfig, PooledInputs, PredictorHead, forward
from singqa.training import TrainConfig


def _piecewise(y_hat, b_a, b_s, alpha, beta):
    if y_hat > alpha:
        return y_hat + b_a
    if y_hat < beta:
        return y_hat - b_s
    return y_hat


@pytest.mark.parametrize('beta, alpha', [(2.0, 4.0), (1.5, 4.5)])
def test_apply_bias_on_a_grid(beta, alpha):
    for step in range(401):
        y_hat = 1.0 + step / 100
        for b_a, b_s in ((0.3, -0.2), (-0.7, 0.4)):
            assert apply_bias(y_hat, b_a, b_s, alpha, beta) == _piecewise(y_hat, b_a, b_s, alpha, beta)
        assert apply_bias(y_hat, 0.0, 0.0, alpha, beta) == y_hat


def test_thresholds_belong_to_the_middle():
    assert apply_bias(4.0, 1.0, 1.0) == 4.0
    assert apply_bias(2.0, 1.0, 1.0) == 2.0
    np.testing.assert_array_equal(apply_bias_array(np.array([4.0, 2.0, 4.5, 1.5]), np.ones(4), np.ones(4), 4.0, 2.0),
                                  [4.0, 2.0, 5.5, 0.5])


@pytest.mark.parametrize('alpha, beta', [(2.0, 4.0), (4.0, 4.0), (5.0, 2.0), (4.0, 1.0)])
def test_invalid_thresholds(alpha, beta):
    with pytest.raises(ValueError):
        apply_bias(3.0, 0.0, 0.0, alpha, beta)


def test_corrected_forward_composes_the_pieces(rng):
    config = HeadConfig.for_variant('plain', 6)
    for trial in range(30):
        head = PredictorHead(config, rng.normal(size=6), [rng.uniform(1, 5)])
        branch = BiasBranch(4.0, 2.0, rng.normal(size=6), [rng.normal()], rng.normal(size=6), [rng.normal()])
        v = rng.normal(size=6)
        b_a = float(v @ branch.add_weights.astype(float) + branch.add_bias[0])
        b_s = float(v @ branch.sub_weights.astype(float) + branch.sub_bias[0])
        expected = _piecewise(forward(head, v), b_a, b_s, 4.0, 2.0)
        assert forward_corrected(head, branch, v) == pytest.approx(expected, abs=1e-9)

        assert forward_corrected(head, BiasBranch.zeros(6), v) == forward(head, v)


def test_segment_mse_boundaries():
    table = segment_mse([3.1, 5.0, 1.0], [3.1, 5.0, 1.0])
    assert list(table.columns) == ['segment_lo', 'segment_hi', 'count', 'mse']
    assert list(table['count']) == [1] + [0] * 7 + [1] + [0] * 6 + [1]
    assert table.loc[8, 'mse'] == 0.0
    assert math.isnan(table.loc[1, 'mse'])
    assert table['segment_lo'].iloc[0] == 1.0 and table['segment_hi'].iloc[-1] == 5.0

    with pytest.raises(ValueError):
        segment_mse([1.0], [5.5])


def test_segment_mse_matches_brute_force(rng):
    labels = rng.uniform(1, 5, 200)
    pred = labels + rng.normal(0, 0.5, 200)
    table = segment_mse(pred, labels)
    for k in range(16):
        lo, hi = 1 + 0.25 * k, 1 + 0.25 * (k + 1)
        inside = [(p - y) ** 2 for p, y in zip(pred, labels) if lo <= y < hi or (k == 15 and y == 5.0)]
        assert table.loc[k, 'count'] == len(inside)
        if inside:
            assert table.loc[k, 'mse'] == pytest.approx(sum(inside) / len(inside))


def _imbalanced_set(seed, n):
    """90% of labels in [3, 5], 10% in [1, 2]. Features are [label, low-region flag] and the base head adds 0.6 to
    every low-region score."""

    rng = np.random.default_rng(seed)
    n_low = n // 10
    labels = np.concatenate([rng.uniform(1.0, 2.0, n_low), rng.uniform(3.0, 5.0, n - n_low)])
    features = np.column_stack([labels, labels < 2.0]).astype(np.float64)
    systems = [f'sys{int((y - 1.0) / 0.5):02d}' for y in labels]
    return PooledInputs(features), labels, systems


def test_bias_branch_fixes_the_low_region():
    head = PredictorHead(HeadConfig.for_variant('plain', 2), [1.0, 0.6], [0.0])
    train, y_train, _ = _imbalanced_set(0, 200)
    val, y_val, val_systems = _imbalanced_set(1, 100)
    alpha, beta = 4.0, 2.7
    cfg = TrainConfig(learning_rate=0.01, max_epochs=300)

    branch, log = train_bias_branch(head, train, y_train, val, y_val, val_systems, alpha, beta, cfg)

    raw = head.predict(val)
    corrected = branch.correct(raw, head.transform(val))
    before = low_segment_mse(segment_mse(raw, y_val), beta)
    after = low_segment_mse(segment_mse(corrected, y_val), beta)
    assert after <= 0.7 * before

    middle = (raw >= beta) & (raw <= alpha)
    assert middle.any()
    np.testing.assert_array_equal(corrected[middle], raw[middle])
    assert head.weights.tolist() == [1.0, pytest.approx(0.6)]
    assert len(log) > 0


def test_unbiased_head_stays_put():
    head = PredictorHead(HeadConfig.for_variant('plain', 2), [1.0, 0.0], [0.0])
    train, y_train, _ = _imbalanced_set(2, 200)
    val, y_val, val_systems = _imbalanced_set(3, 100)

    branch, _ = train_bias_branch(head, train, y_train, val, y_val, val_systems, 4.0, 2.0,
                                  TrainConfig(learning_rate=0.01, max_epochs=50))
    raw = head.predict(val)
    corrected = branch.correct(raw, head.transform(val))
    assert abs(np.mean(np.abs(corrected - y_val)) - np.mean(np.abs(raw - y_val))) <= 1e-3


def test_inactive_branch_warns(caplog):
    head = PredictorHead(HeadConfig.for_variant('plain', 1), [0.0], [3.0])
    pooled = PooledInputs(np.zeros((10, 1)))
    labels = np.linspace(1.5, 4.5, 10)
    with caplog.at_level(logging.WARNING):
        branch, log = train_bias_branch(head, pooled, labels, pooled, labels, ['a', 'b'] * 5)
    assert 'zero bias branch' in caplog.text
    assert len(log) == 0
    assert not branch.add_weights.any() and not branch.sub_weights.any()


@pytest.mark.parametrize('alpha, beta', [(4.0, 2.0), (4.0, 2.7), (3.5, 3.0), (4.8, 1.2)])
def test_middle_band_ignores_branch_weights(rng, alpha, beta):
    features = rng.normal(size=(200, 5))
    y_hat = rng.uniform(1.0, 5.0, size=200)
    y_hat[:4] = [alpha, beta, alpha, beta]
    middle = (y_hat >= beta) & (y_hat <= alpha)
    for trial in range(10):
        branch = BiasBranch(alpha, beta, rng.normal(0, 3, 5), [rng.normal()], rng.normal(0, 3, 5), [rng.normal()])
        corrected = branch.correct(y_hat, features)
        np.testing.assert_array_equal(corrected[middle], y_hat[middle])
        assert not np.array_equal(corrected[~middle], y_hat[~middle])
