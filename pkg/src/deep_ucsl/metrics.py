"""Mixture-of-experts prediction and the class / subgroup / overall balanced accuracies."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import nn
from .clustering import Centroids, soft_assign
from .reident import Permutation

EXHAUSTIVE_MAX_K = 8


@dataclass
class PredictionBatch:
    p_disease: np.ndarray
    subgroup_probs: np.ndarray
    hard_class: np.ndarray
    hard_subgroup: np.ndarray


@dataclass
class MetricsReport:
    class_bacc: float
    subgroup_bacc: float
    overall_bacc: float
    alignment: Permutation
    counts: dict

    def to_kv(self) -> str:
        lines = [
            f"class_bacc={self.class_bacc!r}",
            f"subgroup_bacc={self.subgroup_bacc!r}",
            f"overall_bacc={self.overall_bacc!r}",
            f"alignment={self.alignment}",
        ]
        lines += [f"{k}={v}" for k, v in self.counts.items()]
        return "\n".join(lines) + "\n"


def predict(params, X, centroids: Centroids | None = None, subgroup_source="head") -> PredictionBatch:
    """p(y=+1|x) = sum_k expert_k(x) * gate_k(x), gate from the clustering head.

    With ``subgroup_source="centroids"`` the subgroup estimate comes from the
    nearest K-means centroid in representation space instead of the head.
    """
    z = nn.encode(params, X)
    gate = nn.cluster_probs(params, z)
    p = (nn.expert_probs(params, z) * gate).sum(axis=1)
    if subgroup_source == "centroids":
        if centroids is None:
            raise ValueError("centroid subgroup source needs centroids")
        probs = soft_assign(z, centroids)
        d2 = ((z[:, None, :] - centroids.means[None]) ** 2).sum(axis=2)
        hard = np.argmin(d2, axis=1)
    elif subgroup_source == "head":
        probs = gate
        hard = np.argmax(gate, axis=1)
    else:
        raise ValueError(f"unknown subgroup source {subgroup_source!r}")
    return PredictionBatch(p, probs, np.where(p >= 0.5, 1, -1), hard)


def class_bacc(y_true, y_pred) -> float:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred differ in length")
    recalls = []
    for cls in (1, -1):
        mask = y_true == cls
        if not mask.any():
            raise ValueError(f"class {cls:+d} has no support in y_true")
        recalls.append(np.mean(y_pred[mask] == cls))
    return float(np.mean(recalls))


def _recall_matrix(c_true, c_pred, k):
    """R[i, j] = fraction of true subgroup i predicted as j."""
    counts = np.zeros((k, k))
    np.add.at(counts, (c_true, c_pred), 1.0)
    support = counts.sum(axis=1)
    if np.any(support == 0):
        raise ValueError(f"true subgroup {int(np.flatnonzero(support == 0)[0])} is empty")
    return counts / support[:, None]


def subgroup_bacc(c_true, c_pred, k):
    """Macro recall under the best relabeling of ``c_pred``.

    Returns ``(score, alignment)`` with ``alignment.sigma[j]`` the true label
    assigned to predicted label ``j``. Exhaustive for K <= 8, Hungarian otherwise.
    """
    c_true = np.asarray(c_true, dtype=int)
    c_pred = np.asarray(c_pred, dtype=int)
    if c_true.shape != c_pred.shape:
        raise ValueError("c_true and c_pred differ in length")
    if c_true.size and (c_true.min() < 0 or c_true.max() >= k or c_pred.min() < 0 or c_pred.max() >= k):
        raise ValueError(f"subgroup labels must lie in [0, {k})")
    recall = _recall_matrix(c_true, c_pred, k)
    rows = np.arange(k)
    if k <= EXHAUSTIVE_MAX_K:
        # match[i] = predicted label paired with true label i
        match = max(itertools.permutations(range(k)), key=lambda p: recall[rows, list(p)].sum())
        match = np.array(match)
    else:
        _, match = linear_sum_assignment(-recall)
    score = float(recall[rows, match].mean())
    sigma = np.empty(k, dtype=int)
    sigma[match] = rows
    return score, Permutation(tuple(sigma))


def overall_bacc(y_true, c_true, y_pred, c_pred_aligned):
    """Balanced accuracy where a disease sample counts as a true positive only
    when its subgroup is also right; right-class/wrong-subgroup counts as FP."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    c_true = np.asarray(c_true)
    c_pred = np.asarray(c_pred_aligned)
    dis, hea = y_true == 1, y_true == -1
    said_dis = y_pred == 1
    tp = int(np.sum(dis & said_dis & (c_true == c_pred)))
    fn = int(np.sum(dis & ~said_dis))
    tn = int(np.sum(hea & ~said_dis))
    fp = int(np.sum(hea & said_dis)) + int(np.sum(dis & said_dis & (c_true != c_pred)))
    if tp + fn == 0:
        raise ValueError("overall_bacc: TP + FN is zero (no disease samples)")
    if tn + fp == 0:
        raise ValueError("overall_bacc: TN + FP is zero (no healthy samples and no subgroup errors)")
    score = 0.5 * tp / (tp + fn) + 0.5 * tn / (tn + fp)
    return float(score), {"TP": tp, "FP": fp, "TN": tn, "FN": fn}


def evaluate(params, dataset, centroids=None, subgroup_source="head") -> MetricsReport:
    """All three balanced accuracies of a model on a labeled dataset."""
    if dataset.c is None or np.any(dataset.c[dataset.positives] < 0):
        raise ValueError("evaluation needs subgroup labels c on every disease row")
    k = params.k
    pred = predict(params, dataset.X, centroids, subgroup_source)
    cls = class_bacc(dataset.y, pred.hard_class)
    pos = dataset.positives
    sub, align = subgroup_bacc(dataset.c[pos], pred.hard_subgroup[pos], k)
    aligned = np.array(align.sigma)[pred.hard_subgroup]
    c_true = np.where(dataset.y == 1, dataset.c, -1)
    overall, counts = overall_bacc(dataset.y, c_true, pred.hard_class, aligned)
    return MetricsReport(cls, sub, overall, align, counts)
