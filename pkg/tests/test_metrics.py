import numpy as np
import pytest

from apan.metrics import UndefinedMetric, accuracy, average_precision, link_metrics, roc_auc

from oracles import ap_oracle, auc_oracle


def test_perfect_separation():
    labels, scores = [1, 1, 0, 0], [0.9, 0.8, 0.2, 0.1]
    assert average_precision(labels, scores) == 1.0
    assert roc_auc(labels, scores) == 1.0


def test_all_equal_scores():
    labels = [1, 0, 1, 0, 0]
    assert roc_auc(labels, [0.3] * 5) == 0.5
    assert average_precision(labels, [0.3] * 5) == pytest.approx(0.4)


@pytest.mark.parametrize("seed", range(10))
def test_twenty_pairs_match_oracle(seed):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.normal(size=40), 1)
    labels = np.r_[np.ones(20), np.zeros(20)]
    assert abs(average_precision(labels, scores) - ap_oracle(labels, scores)) < 1e-12
    assert abs(roc_auc(labels, scores) - auc_oracle(labels, scores)) < 1e-12


def test_ap_independent_of_tie_order():
    labels = np.array([1, 0, 1, 0])
    scores = np.array([0.5, 0.5, 0.5, 0.1])
    flipped = [2, 1, 0, 3]
    assert average_precision(labels, scores) == average_precision(labels[flipped], scores[flipped])


def test_undefined_cases():
    with pytest.raises(UndefinedMetric):
        average_precision([0, 0], [0.1, 0.2])
    with pytest.raises(UndefinedMetric):
        roc_auc([1, 1], [0.1, 0.2])
    with pytest.raises(ValueError):
        roc_auc([1, 0], [0.1])


def test_accuracy_threshold_on_logits():
    assert accuracy([1, 0, 1, 0], [2.0, -1.0, -0.5, 0.0]) == 0.5


def test_link_metrics_keys():
    out = link_metrics([3.0, 2.0], [-1.0, -2.0])
    assert out == {"ap": 1.0, "accuracy": 1.0, "auc": 1.0}
