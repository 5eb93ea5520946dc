"""Mixed correctness / option-choice objective.

For a response with option logits ``z`` the per-record loss is

    correct answer:    -log p[correct]
    incorrect answer:  -(lam * log sum_{k != correct} p[k] + (1 - lam) * log p[chosen])

All terms are differences of log-sum-exps, so no probability is ever
formed in linear space.  ``lam = 1`` is pure correctness tracing,
``lam = 0`` pure option tracing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class DpLossSpec:
    lam: float

    def __post_init__(self):
        check_lambda(self.lam)


def check_lambda(lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return float(lam)


def _lse(v: np.ndarray) -> float:
    m = v.max()
    return float(m + np.log(np.exp(v - m).sum()))


def dp_loss(logits, chosen: int, correct: int, lam: float) -> float:
    """Negative mixed log-likelihood of one response."""
    check_lambda(lam)
    z = np.asarray(logits, dtype=np.float64)
    j = len(z)
    if j < 2:
        raise ValueError("items need at least two options")
    if not (0 <= chosen < j and 0 <= correct < j):
        raise IndexError(f"option index out of range for {j} options")
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("non-finite logits")
    total = _lse(z)
    if chosen == correct:
        return total - z[correct]
    wrong = _lse(np.delete(z, correct))
    return total - (lam * wrong + (1.0 - lam) * z[chosen])


def batch_loss(records: Sequence[tuple], lam: float) -> float:
    """Mean of :func:`dp_loss` over ``(logits, chosen, correct)`` records."""
    if len(records) == 0:
        raise ValueError("empty batch")
    return float(np.mean([dp_loss(z, c, r, lam) for z, c, r in records]))


def dp_loss_rows(logits: ad.Tensor, valid: np.ndarray, chosen, correct, lam: float) -> ad.Tensor:
    """Per-row loss for a padded batch of logits recorded on a tape.

    ``logits`` has shape (B, J) with ``valid`` marking the real options of
    each row.  Returns a (B,) tensor.
    """
    check_lambda(lam)
    valid = np.asarray(valid, dtype=bool)
    chosen = np.asarray(chosen, dtype=np.int64)
    correct = np.asarray(correct, dtype=np.int64)
    cols = np.arange(valid.shape[1])
    pick = cols == chosen[:, None]
    wrong = valid & (cols != correct[:, None])
    is_correct = chosen == correct

    # weights of log p[chosen] and log(incorrect mass); they sum to one per row
    w_pick = np.where(is_correct, 1.0, 1.0 - lam)
    w_wrong = np.where(is_correct, 0.0, lam)

    total = ad.log_sum_exp(logits, valid)
    log_pick = ad.log_sum_exp(logits, pick)
    log_wrong = ad.log_sum_exp(logits, wrong)
    return ad.sub(total, ad.add(ad.multiply(log_pick, w_pick), ad.multiply(log_wrong, w_wrong)))


def dp_batch_loss(logits: ad.Tensor, valid, chosen, correct, lam: float) -> ad.Tensor:
    return ad.mean(dp_loss_rows(logits, valid, chosen, correct, lam))
