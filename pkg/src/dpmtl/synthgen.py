"""Polytomous IRT simulator with known ground truth.

Responses follow the DP-IRT family exactly: user ``u`` picks option ``k``
of item ``i`` with probability ``softmax((theta_u . a_{i,k} + b_{i,k}) / T)``.
Correct options get vectors ``discrimination * |N(0, I)|`` so that higher
ability raises the chance of answering correctly.  Incorrect options get
``discrimination * distractor_scale * N(0, I)``: a small distractor scale
makes the choice among wrong options carry almost no information about
the user.  ``correct_shift`` raises every correct option's bias so the
overall correct rate sits near that of a real exam.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset
from .metrics import UndefinedMetric, roc_auc
from .models import ParameterStore
from .rng import make_rng


@dataclass(frozen=True)
class GenConfig:
    num_users: int = 200
    num_items: int = 50
    options: int | tuple[int, ...] = 4
    dim: int = 4
    discrimination: float = 1.0
    temperature: float = 1.0
    distractor_scale: float = 1.0
    bias_scale: float = 1.0
    correct_shift: float = 1.0
    density: float = 1.0
    score_weights: tuple[float, ...] | None = None
    score_intercept: float = 500.0
    score_noise: float = 0.0
    seed: int = 0
    name: str = "synthetic"

    def __post_init__(self):
        if self.num_users < 1 or self.num_items < 1 or self.dim < 1:
            raise ValueError("num_users, num_items and dim must be positive")
        opts = self.option_counts()
        if len(opts) != self.num_items or min(opts) < 2:
            raise ValueError("every item needs at least two options")
        if self.discrimination < 0 or self.distractor_scale < 0 or self.bias_scale < 0:
            raise ValueError("scales must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.density <= 1:
            raise ValueError("density must be in (0, 1]")
        if self.score_noise < 0:
            raise ValueError("score noise must be non-negative")
        if self.score_weights is not None and len(self.score_weights) != self.dim:
            raise ValueError("score_weights must have one entry per latent dimension")

    def option_counts(self) -> list[int]:
        if isinstance(self.options, int):
            return [self.options] * self.num_items
        return list(self.options)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["options"] = self.options if isinstance(self.options, int) else list(self.options)
        return d


@dataclass
class GroundTruth:
    """True generative parameters in the DP-IRT parameter layout."""

    params: ParameterStore
    correct: np.ndarray
    temperature: float
    score_weights: np.ndarray
    score_intercept: float
    clean_scores: np.ndarray = field(repr=False)

    @property
    def theta(self) -> np.ndarray:
        return self.params["user"]


def _true_logits(truth: GroundTruth, users, items, rows, valid):
    theta = truth.params["user"][users]
    a = truth.params["option"][rows]
    b = truth.params["bias"][rows]
    z = (np.einsum("bd,bjd->bj", theta, a) + b) / truth.temperature
    return np.where(valid, z, -np.inf)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def generate_dataset(g: GenConfig) -> tuple[Dataset, GroundTruth]:
    rng = make_rng(g.seed, 0x51)
    opts = np.array(g.option_counts())
    offsets = np.concatenate([[0], np.cumsum(opts)[:-1]])
    total = int(opts.sum())

    theta = rng.standard_normal((g.num_users, g.dim))
    correct = rng.integers(0, opts)
    option = g.discrimination * g.distractor_scale * rng.standard_normal((total, g.dim))
    option[offsets + correct] = g.discrimination * np.abs(rng.standard_normal((g.num_items, g.dim)))
    bias = g.bias_scale * rng.standard_normal(total)
    bias[offsets + correct] += g.correct_shift
    params = ParameterStore(user=theta, option=option, bias=bias)

    if g.score_weights is None:
        w = np.full(g.dim, 100.0 / np.sqrt(g.dim))
    else:
        w = np.asarray(g.score_weights, dtype=np.float64)
    clean = theta @ w + g.score_intercept
    noisy = clean + g.score_noise * rng.standard_normal(g.num_users)
    truth = GroundTruth(params, correct, g.temperature, w, g.score_intercept, clean)

    users, items = np.divmod(np.arange(g.num_users * g.num_items), g.num_items)
    if g.density < 1:
        keep = rng.random(len(users)) < g.density
        users, items = users[keep], items[keep]
    width = int(opts.max())
    cols = np.arange(width)
    valid = cols[None, :] < opts[items][:, None]
    rows = np.where(valid, offsets[items][:, None] + cols[None, :], 0)
    p = _softmax(_true_logits(truth, users, items, rows, valid))
    # inverse-CDF sampling, one uniform per interaction
    u = rng.random(len(users))[:, None]
    chosen = np.minimum((np.cumsum(p, axis=1) < u).sum(axis=1), opts[items] - 1)

    data = Dataset(
        num_users=g.num_users,
        num_items=g.num_items,
        options_per_item=opts,
        users=users,
        items=items,
        chosen=chosen,
        correct=correct[items],
        positions=items,
        scores={u_: float(s) for u_, s in enumerate(noisy)},
        name=g.name,
    )
    return data, truth


def true_probabilities(part: Dataset, truth: GroundTruth) -> np.ndarray:
    """Generative option probabilities for every interaction, padded with zeros."""
    opts = part.options_per_item
    if len(truth.correct) != part.num_items or truth.params["user"].shape[0] != part.num_users:
        raise ValueError("ground truth does not match the dataset's index space")
    offsets = np.concatenate([[0], np.cumsum(opts)[:-1]])
    width = int(opts.max())
    cols = np.arange(width)
    valid = cols[None, :] < opts[part.items][:, None]
    rows = np.where(valid, offsets[part.items][:, None] + cols[None, :], 0)
    return _softmax(_true_logits(truth, part.users, part.items, rows, valid))


def bayes_optimal_metrics(part: Dataset, truth: GroundTruth) -> tuple[float | None, float]:
    """(KT-AUC, OT-ACC) of the true generative probabilities on ``part``."""
    p = true_probabilities(part, truth)
    rows = np.arange(len(part))
    try:
        auc = roc_auc(p[rows, part.correct], part.labels)
    except UndefinedMetric:
        auc = None
    acc = float(np.mean(np.argmax(p, axis=1) == part.chosen))
    return auc, acc
