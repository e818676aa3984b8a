"""Classification metrics: MCC, F1, ROC/PR areas, per-label AUC medians.

Undefined values (a zero marginal for MCC, single-class targets for AUC)
come back as None, never as a silent 0. AUC-ROC uses the rank statistic
with tie-averaged ranks; AUC-PR is step-wise average precision with equal
scores collapsed into one threshold group.
"""

from __future__ import annotations

import numpy as np


def _ints(x) -> np.ndarray:
    return np.asarray(x, dtype=np.int64).ravel()


def accuracy(preds, targets) -> float:
    p, t = _ints(preds), _ints(targets)
    if len(p) != len(t) or len(p) == 0:
        raise ValueError("need equal-length non-empty predictions and targets")
    return float((p == t).mean())


def _binary_counts(preds, targets) -> tuple[int, int, int, int]:
    p, t = _ints(preds), _ints(targets)
    tp = int(((p == 1) & (t == 1)).sum())
    tn = int(((p == 0) & (t == 0)).sum())
    fp = int(((p == 1) & (t == 0)).sum())
    fn = int(((p == 0) & (t == 1)).sum())
    return tp, tn, fp, fn


def precision(preds, targets) -> float | None:
    tp, _, fp, _ = _binary_counts(preds, targets)
    return tp / (tp + fp) if tp + fp else None


def recall(preds, targets) -> float | None:
    tp, _, _, fn = _binary_counts(preds, targets)
    return tp / (tp + fn) if tp + fn else None


def mcc(preds, targets) -> float | None:
    """Matthews correlation, generalized to any number of classes.

    Returns None when a marginal is zero (all predictions or all targets
    fall in one class), where the coefficient is undefined.
    """
    p, t = _ints(preds), _ints(targets)
    if len(p) != len(t) or len(p) == 0:
        raise ValueError("need equal-length non-empty predictions and targets")
    classes = np.union1d(p, t)
    s = len(p)
    c = int((p == t).sum())
    p_k = np.array([(p == k).sum() for k in classes], dtype=np.float64)
    t_k = np.array([(t == k).sum() for k in classes], dtype=np.float64)
    cov = c * s - float(p_k @ t_k)
    denom_p = s * s - float(p_k @ p_k)
    denom_t = s * s - float(t_k @ t_k)
    if denom_p == 0.0 or denom_t == 0.0:
        return None
    return cov / np.sqrt(denom_p * denom_t)


def f1(preds, targets, averaging: str = "binary",
       n_classes: int | None = None) -> float:
    """F1 score. averaging: "binary" (class 1 is positive), "macro"
    (unweighted mean of per-class F1), or "micro". A class with no true or
    predicted members contributes an F1 of 0 to the macro mean."""
    p, t = _ints(preds), _ints(targets)
    if len(p) != len(t) or len(p) == 0:
        raise ValueError("need equal-length non-empty predictions and targets")

    def class_f1(k: int) -> float:
        tp = int(((p == k) & (t == k)).sum())
        fp = int(((p == k) & (t != k)).sum())
        fn = int(((p != k) & (t == k)).sum())
        denom = 2 * tp + fp + fn
        return 2 * tp / denom if denom else 0.0

    if averaging == "binary":
        return class_f1(1)
    classes = (np.arange(n_classes) if n_classes is not None
               else np.union1d(p, t))
    if averaging == "macro":
        return float(np.mean([class_f1(int(k)) for k in classes]))
    if averaging == "micro":
        tp = sum(int(((p == k) & (t == k)).sum()) for k in classes)
        fp = sum(int(((p == k) & (t != k)).sum()) for k in classes)
        fn = sum(int(((p != k) & (t == k)).sum()) for k in classes)
        denom = 2 * tp + fp + fn
        return 2 * tp / denom if denom else 0.0
    raise ValueError(f"unknown averaging {averaging!r}")


def _tie_averaged_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with equal scores sharing their average rank."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc_roc(scores, targets) -> float | None:
    """Area under the ROC curve via the Mann-Whitney rank statistic."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    t = _ints(targets)
    if len(s) != len(t) or len(s) == 0:
        raise ValueError("need equal-length non-empty scores and targets")
    n_pos = int((t == 1).sum())
    n_neg = int((t == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _tie_averaged_ranks(s)
    return (float(ranks[t == 1].sum()) - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc_pr(scores, targets) -> float | None:
    """Average precision: sum of precision-at-threshold weighted by recall
    increments, one threshold per distinct score (descending)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    t = _ints(targets)
    if len(s) != len(t) or len(s) == 0:
        raise ValueError("need equal-length non-empty scores and targets")
    n_pos = int((t == 1).sum())
    n_neg = int((t == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    t_sorted = t[order]
    ap = 0.0
    tp = fp = 0
    i = 0
    while i < len(s_sorted):
        j = i
        while j + 1 < len(s_sorted) and s_sorted[j + 1] == s_sorted[i]:
            j += 1
        d_tp = int((t_sorted[i:j + 1] == 1).sum())
        d_fp = (j - i + 1) - d_tp
        tp += d_tp
        fp += d_fp
        ap += (d_tp / n_pos) * (tp / (tp + fp))
        i = j + 1
    return ap


def median_auc_per_label(score_matrix, target_matrix) -> float | None:
    """Median of per-label AUC-ROC over a (n, k) multilabel task; labels
    where the AUC is undefined (single-class) are skipped."""
    s = np.asarray(score_matrix, dtype=np.float64)
    t = np.asarray(target_matrix, dtype=np.int64)
    if s.shape != t.shape or s.ndim != 2:
        raise ValueError(f"need matching (n, k) matrices, got {s.shape} and {t.shape}")
    values = []
    for k in range(s.shape[1]):
        a = auc_roc(s[:, k], t[:, k])
        if a is not None:
            values.append(a)
    if not values:
        return None
    return float(np.median(values))
