"""Rank-based ROC AUC and its per-player aggregation."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import MetricUndefined


def roc_auc(labels, scores) -> float:
    """Mann-Whitney AUC with midranks: P(s+ > s-) + 0.5 P(s+ = s-)."""
    y = np.asarray(labels, dtype=np.float64).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    if y.shape != s.shape:
        raise ValueError("labels and scores differ in length")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefined("ROC AUC needs both classes")
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def per_player_aucs(groups: Mapping[str, tuple[Sequence, Sequence]]) -> tuple[dict[str, float], list[str]]:
    """AUC within each player; returns ``(aucs, excluded_player_ids)``."""
    aucs: dict[str, float] = {}
    excluded: list[str] = []
    for pid in sorted(groups):
        labels, scores = groups[pid]
        try:
            aucs[pid] = roc_auc(labels, scores)
        except MetricUndefined:
            excluded.append(pid)
    return aucs, excluded


def per_player_mean_auc(groups: Mapping[str, tuple[Sequence, Sequence]]) -> float:
    """Unweighted mean of per-player AUCs; single-class players are skipped."""
    aucs, _ = per_player_aucs(groups)
    if not aucs:
        raise MetricUndefined("no player has both classes")
    return float(np.mean([aucs[k] for k in sorted(aucs)]))


def pooled_auc(groups: Mapping[str, tuple[Sequence, Sequence]]) -> float:
    """AUC over all players' bins at once (reported for contrast only)."""
    labels = np.concatenate([np.asarray(groups[k][0], dtype=float) for k in sorted(groups)])
    scores = np.concatenate([np.asarray(groups[k][1], dtype=float) for k in sorted(groups)])
    return roc_auc(labels, scores)
