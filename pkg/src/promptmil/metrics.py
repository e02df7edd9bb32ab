"""Rank-based evaluation metrics: AUC (Mann-Whitney) and Harrell's C-index."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .losses import SurvivalRecord


class MetricError(ValueError):
    pass


def _midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve via the rank statistic; ties count 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise MetricError("scores and labels must have equal length")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != len(labels):
        raise MetricError("labels must be 0/1")
    if n_pos == 0 or n_neg == 0:
        raise MetricError("both classes must be present to compute AUC")
    ranks = _midranks(scores)
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_ovr_auc(probs: np.ndarray, labels: Sequence[int]) -> float:
    """One-vs-rest macro AUC for >= 3-class tasks."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    return float(np.mean([auc(probs[:, c], (labels == c).astype(int))
                          for c in range(probs.shape[1])]))


def c_index(risks: Sequence[float], records: Sequence[SurvivalRecord]) -> float:
    """Harrell's concordance over comparable pairs.

    Pairs (a, b) with time_a < time_b and event_a = 1 are comparable;
    a pair is concordant when the earlier event carries the higher risk,
    and risk ties count one half.
    """
    risks = np.asarray(risks, dtype=np.float64)
    if len(risks) != len(records):
        raise MetricError("risks and records must have equal length")
    times = np.array([r.time for r in records])
    events = np.array([r.event for r in records])
    comparable = (times[:, None] < times[None, :]) & (events[:, None] == 1)
    n_comp = int(comparable.sum())
    if n_comp == 0:
        raise MetricError("no comparable pairs (check censoring and times)")
    concordant = comparable & (risks[:, None] > risks[None, :])
    tied = comparable & (risks[:, None] == risks[None, :])
    return float((concordant.sum() + 0.5 * tied.sum()) / n_comp)
