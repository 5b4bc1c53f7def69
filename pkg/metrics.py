#!/usr/bin/env python3
"""
metrics.py — Accuracy and quadratic weighted kappa (QWK)

QWK (Cohen's kappa, quadratic weights):
    w_ij = (i - j)² / (c - 1)²
    O    = confusion matrix, O[i][j] = #(true=i, pred=j)
    E    = outer(row marginals, column marginals) / N
    κ    = 1 - Σ w·O / Σ w·E        (Σ w·E = 0, i.e. both raters constant: κ = 0)
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.metrics import confusion_matrix as _sk_confusion_matrix

from errors import ValidationError


def _as_labels(values: Sequence[int], what: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise ValidationError(f"{what} must be a 1-D sequence of class indices, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        raise ValidationError(f"{what} must hold integer class indices, got dtype {arr.dtype}")
    return arr.astype(np.int64)


def accuracy(preds: Sequence[int], labels: Sequence[int]) -> float:
    p = _as_labels(preds, "preds")
    y = _as_labels(labels, "labels")
    if p.shape != y.shape:
        raise ValidationError(f"preds ({p.size}) and labels ({y.size}) differ in length")
    if p.size == 0:
        raise ValidationError("accuracy of an empty set is undefined")
    return float(np.mean(p == y))


def confusion_matrix(preds: Sequence[int], labels: Sequence[int], num_classes: int) -> np.ndarray:
    """c×c counts, rows = true class, columns = predicted class."""
    p = _as_labels(preds, "preds")
    y = _as_labels(labels, "labels")
    if p.shape != y.shape:
        raise ValidationError(f"preds ({p.size}) and labels ({y.size}) differ in length")
    for name, arr in (("preds", p), ("labels", y)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValidationError(f"{name} must lie in [0, {num_classes}), got range [{arr.min()}, {arr.max()}]")
    return _sk_confusion_matrix(y, p, labels=np.arange(num_classes)).astype(np.int64)


def qwk(preds: Sequence[int], labels: Sequence[int], num_classes: int) -> float:
    if len(preds) == 0 or len(labels) == 0:
        raise ValidationError("qwk of an empty set is undefined")
    if num_classes < 2:
        raise ValidationError(f"qwk needs at least 2 classes, got {num_classes}")
    O = confusion_matrix(preds, labels, num_classes).astype(np.float64)
    n = O.sum()
    idx = np.arange(num_classes, dtype=np.float64)
    W = (idx[:, None] - idx[None, :]) ** 2 / (num_classes - 1) ** 2
    E = np.outer(O.sum(axis=1), O.sum(axis=0)) / n
    numer = float((W * O).sum())
    denom = float((W * E).sum())
    if denom == 0.0:
        # both raters constant: no chance-corrected agreement to measure
        return 0.0
    return 1.0 - numer / denom
