import numpy as np
import pytest
from sklearn.metrics import cohen_kappa_score

from errors import ValidationError
from metrics import accuracy, confusion_matrix, qwk


def test_accuracy():
    assert accuracy([1, 2, 3, 4], [1, 2, 0, 4]) == 0.75


def test_accuracy_checks():
    with pytest.raises(ValidationError):
        accuracy([], [])
    with pytest.raises(ValidationError):
        accuracy([1, 2], [1])
    with pytest.raises(ValidationError):
        accuracy([0.5], [1])


def test_confusion_matrix_rows_are_true_class():
    cm = confusion_matrix([0, 1, 1, 2], [0, 0, 1, 2], 4)
    assert cm.shape == (4, 4)
    assert cm[0, 1] == 1 and cm[0, 0] == 1 and cm[3].sum() == 0


def test_confusion_matrix_out_of_range():
    with pytest.raises(ValidationError, match="preds"):
        confusion_matrix([5], [0], 3)


def test_qwk_perfect_and_reversed():
    labels = [0, 1, 2, 3, 4]
    assert qwk(labels, labels, 5) == pytest.approx(1.0)
    assert qwk(labels[::-1], labels, 5) == pytest.approx(-1.0)


def test_qwk_matches_reference(rng):
    labels = rng.integers(0, 10, size=200)
    preds = np.clip(labels + rng.integers(-2, 3, size=200), 0, 9)
    assert qwk(preds, labels, 10) == pytest.approx(cohen_kappa_score(labels, preds, weights="quadratic"), abs=1e-12)


def test_qwk_constant_raters_are_zero():
    assert qwk([3, 3], [3, 3], 10) == 0.0
    assert qwk([0, 0, 0], [2, 2, 2], 3) == 0.0


def test_qwk_one_constant_rater():
    assert qwk([2, 4], [3, 3], 10) == pytest.approx(0.0, abs=1e-12)


def test_qwk_checks():
    with pytest.raises(ValidationError):
        qwk([], [], 10)
    with pytest.raises(ValidationError):
        qwk([0], [0], 1)


def test_qwk_constant_predictor():
    assert qwk([1, 1, 1], [0, 1, 2], 3) == pytest.approx(0.0, abs=1e-12)


def test_qwk_three_class_by_hand():
    # O = [[1,0,0],[0,1,1],[0,0,1]], weighted disagreement 0.25 observed vs 1.25 expected
    assert qwk([0, 1, 2, 2], [0, 1, 1, 2], 3) == pytest.approx(0.8, abs=1e-12)


def test_qwk_mixed_disagreement_by_hand():
    # O = [[1,0,0],[0,0,1],[0,1,1]]: 0.5 observed vs 22/16 expected weighted disagreement
    labels, preds = [0, 1, 2, 2], [0, 2, 2, 1]
    assert qwk(preds, labels, 3) == pytest.approx(7 / 11, abs=1e-12)
    assert qwk(labels, preds, 3) == pytest.approx(7 / 11, abs=1e-12)
    assert qwk(preds, labels, 3) == pytest.approx(cohen_kappa_score(labels, preds, weights="quadratic"), abs=1e-12)
