"""Regression and classification metrics."""
from __future__ import annotations

import numpy as np


def mse(pred, target):
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    return float(np.mean((pred - target) ** 2)) if pred.size else 0.0


def r2_score(pred, target):
    """``1 - SS_res / SS_tot``; a constant target gives 1.0 for exact predictions, else 0.0."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    ss_res = float(np.sum((target - pred) ** 2))
    ss_tot = float(np.sum((target - target.mean()) ** 2)) if target.size else 0.0
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return 1.0 - ss_res / ss_tot


def accuracy(pred, target):
    pred, target = np.asarray(pred), np.asarray(target)
    return float(np.mean(pred == target)) if target.size else 0.0


def macro_f1(pred, target):
    """Unweighted mean of per-class F1 over classes present in either array."""
    pred, target = np.asarray(pred), np.asarray(target)
    classes = np.union1d(pred, target)
    if not classes.size:
        return 0.0
    scores = []
    for c in classes:
        tp = np.sum((pred == c) & (target == c))
        fp = np.sum((pred == c) & (target != c))
        fn = np.sum((pred != c) & (target == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def majority_class(train_labels, num_classes=None):
    counts = np.bincount(np.asarray(train_labels), minlength=num_classes or 0)
    return int(np.argmax(counts))


def mean_std(values):
    """Mean and sample standard deviation (``ddof=1``; zero for one value)."""
    values = np.asarray(values, dtype=np.float64)
    std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return float(values.mean()), std
