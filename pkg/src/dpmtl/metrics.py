"""Evaluation metrics and the rank-averaging analysis across mixing ratios."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np
from scipy.stats import rankdata

from .data import OptionPrediction

PAPER_LAMBDAS = tuple(round(0.1 * k, 1) for k in range(11))


class UndefinedMetric(ValueError):
    """Raised when a metric has no value for the given input (e.g. one-class AUC)."""


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative.

    Ties count one half.  Computed from the rank sum of the positives.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("ROC-AUC needs at least one positive and one negative label")
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc_bruteforce(scores, labels) -> float:
    """O(P*N) pairwise reference for :func:`roc_auc`."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    p, n = s[y == 1], s[y != 1]
    if len(p) == 0 or len(n) == 0:
        raise UndefinedMetric("ROC-AUC needs at least one positive and one negative label")
    wins = 0.0
    for a in p:
        for b in n:
            if a > b:
                wins += 1.0
            elif a == b:
                wins += 0.5
    return wins / (len(p) * len(n))


def ot_accuracy(predictions: Sequence[OptionPrediction], chosen: Sequence[int]) -> float:
    """Fraction of queries whose most probable option is the chosen one.

    Argmax ties resolve to the lowest option index.
    """
    if len(predictions) != len(chosen):
        raise ValueError("predictions and chosen must have equal length")
    if len(predictions) == 0:
        raise ValueError("empty input")
    hits = sum(p.argmax == int(c) for p, c in zip(predictions, chosen))
    return hits / len(predictions)


def option_accuracy(probs: np.ndarray, chosen) -> float:
    """Vectorized :func:`ot_accuracy` over a padded (B, J) probability matrix.

    Padded columns must hold probability 0.
    """
    chosen = np.asarray(chosen)
    if len(chosen) == 0:
        raise ValueError("empty input")
    return float(np.mean(np.argmax(probs, axis=1) == chosen))


def mae(predicted, actual) -> float:
    p = np.asarray(predicted, dtype=np.float64)
    a = np.asarray(actual, dtype=np.float64)
    if p.shape != a.shape:
        raise ValueError("predicted and actual must have equal length")
    if p.size == 0:
        raise ValueError("empty input")
    return float(np.mean(np.abs(p - a)))


class IncompleteTable(ValueError):
    pass


@dataclass
class RankTable:
    """Metric values per configuration row across a grid of mixing ratios.

    ``rows`` maps a row key whose first element is the task name to a
    ``{lam: value}`` mapping.  ``higher_better`` gives each task's metric
    orientation.
    """

    lambdas: tuple[float, ...] = PAPER_LAMBDAS
    rows: dict[tuple, dict[float, float]] = field(default_factory=dict)
    higher_better: dict[str, bool] = field(default_factory=dict)

    def set(self, key: tuple, lam: float, value: float, higher_better: bool | None = None):
        self.rows.setdefault(tuple(key), {})[round(float(lam), 10)] = float(value)
        if higher_better is not None:
            self.higher_better[key[0]] = higher_better

    def row_ranks(self, key: tuple) -> np.ndarray:
        cells = self.rows[key]
        values = []
        for lam in self.lambdas:
            v = cells.get(round(float(lam), 10))
            if v is None or not np.isfinite(v):
                raise IncompleteTable(f"missing cell {key} at lambda={lam}")
            values.append(v)
        values = np.asarray(values)
        task = key[0]
        if task not in self.higher_better:
            raise IncompleteTable(f"no metric orientation for task {task!r}")
        # rank 1 is best
        return rankdata(-values if self.higher_better[task] else values, method="average")


def rank_average(t: RankTable) -> dict[Hashable, np.ndarray]:
    """Mean rank of each lambda column per task, averaged over that task's rows."""
    per_task: dict[Hashable, list[np.ndarray]] = {}
    for key in t.rows:
        per_task.setdefault(key[0], []).append(t.row_ranks(key))
    return {task: np.mean(ranks, axis=0) for task, ranks in per_task.items()}


def overall_rank(t: RankTable) -> np.ndarray:
    """Mean rank per lambda over every row of the table, regardless of task."""
    return np.mean([t.row_ranks(k) for k in t.rows], axis=0)
