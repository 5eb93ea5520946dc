"""Downstream score prediction from learned user representations.

A least-squares linear head maps a user vector to a raw score, and an
isotonic step function (pool-adjacent-violators) recalibrates the raw
score monotonically.  Between knots the calibration interpolates
linearly; outside the knot range it clamps to the end values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .metrics import mae

RIDGE_JITTER = 1e-8


@dataclass(frozen=True)
class IsotonicStep:
    knots_x: np.ndarray
    knots_y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.knots_x, dtype=np.float64)
        y = np.asarray(self.knots_y, dtype=np.float64)
        if x.shape != y.shape or x.size == 0:
            raise ValueError("knot arrays must be non-empty and of equal length")
        if np.any(np.diff(x) <= 0):
            raise ValueError("knot inputs must be strictly increasing")
        if np.any(np.diff(y) < 0):
            raise ValueError("knot values must be non-decreasing")
        object.__setattr__(self, "knots_x", x)
        object.__setattr__(self, "knots_y", y)

    def __call__(self, v):
        return np.interp(v, self.knots_x, self.knots_y)


@dataclass(frozen=True)
class SpModel:
    weights: np.ndarray
    intercept: float
    calibration: IsotonicStep
    rank_deficient: bool = False

    def linear(self, theta) -> np.ndarray:
        return np.asarray(theta, dtype=np.float64) @ self.weights + self.intercept

    def to_json(self) -> str:
        return json.dumps(
            {
                "weights": self.weights.tolist(),
                "intercept": self.intercept,
                "knots": [self.calibration.knots_x.tolist(), self.calibration.knots_y.tolist()],
                "rank_deficient": self.rank_deficient,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "SpModel":
        d = json.loads(text)
        return cls(
            np.asarray(d["weights"], dtype=np.float64),
            float(d["intercept"]),
            IsotonicStep(*d["knots"]),
            bool(d["rank_deficient"]),
        )


def fit_linear(theta, scores) -> tuple[np.ndarray, float, bool]:
    """Least-squares weights and intercept via the normal equations.

    Returns ``(weights, intercept, rank_deficient)``.  A rank-deficient
    design gets a ridge jitter of 1e-8 on the diagonal.
    """
    X = np.asarray(theta, dtype=np.float64)
    y = np.asarray(scores, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if len(X) == 0:
        raise ValueError("no training users")
    if len(X) != len(y):
        raise ValueError("theta and scores must have the same number of rows")
    A = np.hstack([X, np.ones((len(X), 1))])
    gram = A.T @ A
    deficient = np.linalg.matrix_rank(A) < A.shape[1]
    if deficient:
        gram = gram + RIDGE_JITTER * np.eye(A.shape[1])
    coef = np.linalg.solve(gram, A.T @ y)
    return coef[:-1], float(coef[-1]), bool(deficient)


def pava(y, w=None) -> np.ndarray:
    """Non-decreasing least-squares fit to the sequence ``y`` (weights ``w``)."""
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=np.float64)
    means: list[float] = []
    weights: list[float] = []
    sizes: list[int] = []
    for yi, wi in zip(y, w):
        means.append(yi)
        weights.append(wi)
        sizes.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            m2, w2, n2 = means.pop(), weights.pop(), sizes.pop()
            tot = weights[-1] + w2
            means[-1] = (means[-1] * weights[-1] + m2 * w2) / tot
            weights[-1] = tot
            sizes[-1] += n2
    return np.repeat(means, sizes)


def fit_isotonic(pred, actual) -> IsotonicStep:
    """Isotonic calibration of ``actual`` against ``pred``.

    Equal ``pred`` values are pooled to their mean before fitting.
    """
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(actual, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("pred and actual must have equal length")
    if x.size == 0:
        raise ValueError("empty input")
    if x.size == 1 or np.all(x[1:] > x[:-1]):
        return IsotonicStep(x, pava(y))
    ux, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    sums = np.bincount(inverse, weights=y)
    fitted = pava(sums / counts, counts)
    return IsotonicStep(ux, fitted)


def fit_sp(theta_train, scores_train) -> SpModel:
    w, b, deficient = fit_linear(theta_train, scores_train)
    raw = np.asarray(theta_train, dtype=np.float64).reshape(len(scores_train), -1) @ w + b
    return SpModel(w, b, fit_isotonic(raw, scores_train), deficient)


def predict_score(theta, m: SpModel):
    """Calibrated score for one user vector (or a matrix of them)."""
    out = m.calibration(m.linear(theta))
    return float(out) if np.ndim(out) == 0 else out


def _score_vector(scores, users) -> np.ndarray:
    if isinstance(scores, Mapping):
        return np.array([scores[int(u)] for u in users], dtype=np.float64)
    return np.asarray(scores, dtype=np.float64)[np.asarray(users)]


def sp_predictions(theta, scores, train_users: Sequence[int], test_users: Sequence[int]):
    """Fit on ``train_users``; return (model, predicted, actual) for ``test_users``."""
    theta = np.asarray(theta, dtype=np.float64)
    train_users = np.asarray(train_users, dtype=np.int64)
    test_users = np.asarray(test_users, dtype=np.int64)
    if len(test_users) == 0:
        raise ValueError("empty test set")
    if np.intersect1d(train_users, test_users).size:
        raise ValueError("train and test users overlap")
    model = fit_sp(theta[train_users], _score_vector(scores, train_users))
    return model, predict_score(theta[test_users], model), _score_vector(scores, test_users)


def sp_evaluate(theta, scores, train_users: Sequence[int], test_users: Sequence[int]) -> float:
    """Test MAE of the linear + isotonic score head fit on training users."""
    _, pred, actual = sp_predictions(theta, scores, train_users, test_users)
    return mae(np.atleast_1d(pred), actual)
