"""Minibatch Adam training under the DP loss, with early stopping."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .loss import check_lambda, dp_batch_loss, dp_loss_rows
from .metrics import UndefinedMetric, roc_auc
from .models import DPModel, ParameterStore
from .rng import make_rng

SELECTION_METRICS = ("loss", "auc", "acc")


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, batch: int, detail: str):
        super().__init__(f"non-finite training state at epoch {epoch}, batch {batch}: {detail}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.5
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    seq_batch_size: int = 32
    max_epochs: int = 500
    patience: int = 10
    seed: int = 0
    selection: str = "loss"

    def __post_init__(self):
        check_lambda(self.lam)
        if self.lr <= 0 or self.batch_size < 1 or self.seq_batch_size < 1:
            raise ValueError("learning rate and batch sizes must be positive")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be at least 1")
        if self.selection not in SELECTION_METRICS:
            raise ValueError(f"selection must be one of {SELECTION_METRICS}")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update.  Returns ``(new_params, new_state)``; inputs are untouched."""
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != p.shape:
            raise ad.ShapeError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            bad = np.argwhere(~np.isfinite(g))[0]
            raise FloatingPointError(f"non-finite gradient for {k} at {tuple(bad)}")
        m = beta1 * state.m[k] + (1 - beta1) * g
        v = beta2 * state.v[k] + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new_p[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[k], new_v[k] = m, v
    return type(params)(new_p), AdamState(new_m, new_v, t)


@dataclass
class EvalResult:
    kt_auc: float | None
    ot_acc: float
    loss: float
    n: int

    def as_dict(self):
        return asdict(self)


@dataclass
class TrainReport:
    config: dict
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_metric: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False
    wall_clock: float = 0.0
    params: ParameterStore | None = None

    def to_json(self, include_wall_clock: bool = True) -> str:
        d = {k: v for k, v in asdict(self).items() if k != "params"}
        if not include_wall_clock:
            d.pop("wall_clock")
        return json.dumps(d, sort_keys=True)


def _batch_size(model: DPModel, cfg: TrainConfig) -> int:
    return cfg.seq_batch_size if model.sequence else cfg.batch_size


def evaluate(model: DPModel, part: Dataset, lam: float = 0.5) -> EvalResult:
    """KT-AUC (``None`` when the part has one label class), OT-ACC and mean DP loss."""
    if len(part) == 0:
        raise ValueError("cannot evaluate on an empty part")
    z, valid = model.predict_logits(part)
    rows = np.arange(len(part))
    loss = dp_loss_rows(ad.Tape(grad=False).constant(z), valid, part.chosen, part.correct, lam).value
    zm = np.where(valid, z, -np.inf)
    p = np.exp(zm - zm.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    try:
        auc = roc_auc(p[rows, part.correct], part.labels)
    except UndefinedMetric:
        auc = None
    # argmax breaks ties toward the lowest option index
    acc = float(np.mean(np.argmax(zm, axis=1) == part.chosen))
    return EvalResult(auc, acc, float(loss.mean()), len(part))


def _selection_value(res: EvalResult, metric: str) -> float:
    """Lower is better."""
    if metric == "loss":
        return res.loss
    if metric == "auc":
        return -(res.kt_auc if res.kt_auc is not None else 0.5)
    return -res.ot_acc


def train(model: DPModel, train_part: Dataset, val_part: Dataset | None, cfg: TrainConfig,
          log=None) -> TrainReport:
    """Fit ``model`` in place and return its report.

    The model's parameters end at the best epoch under ``cfg.selection``
    on ``val_part`` (train loss when there is no validation data).
    Sequence models read their history from ``train_part``.
    """
    if len(train_part) == 0:
        raise ValueError("training part is empty")
    started = time.perf_counter()
    model.set_context(train_part)
    monitor = val_part if val_part is not None and len(val_part) else None
    report = TrainReport(config=asdict(cfg))
    shuffle = make_rng(cfg.seed, 0x7A)
    state = AdamState.zeros_like(model.params)
    params = model.params
    best, best_params, waited = np.inf, params.copy(), 0
    bs = _batch_size(model, cfg)

    for epoch in range(cfg.max_epochs):
        losses, weights = [], []
        for b_idx, batch in enumerate(model.batches(train_part, bs, shuffle)):
            tape = ad.Tape()
            leaves = model.leaves(tape, params)
            valid = model.valid(batch)
            try:
                loss = dp_batch_loss(model.logits(leaves, batch), valid, batch.chosen, batch.correct, cfg.lam)
                grads = ad.backward(tape, loss)
                params, state = adam_step(
                    params, {k: grads[t] for k, t in leaves.items()}, state,
                    cfg.lr, cfg.beta1, cfg.beta2, cfg.eps,
                )
            except FloatingPointError as exc:
                raise TrainingDiverged(epoch, b_idx, str(exc)) from exc
            losses.append(float(loss.value))
            weights.append(len(batch.users))
        model.params = params
        report.train_loss.append(float(np.average(losses, weights=weights)))
        if monitor is not None:
            res = evaluate(model, monitor, cfg.lam)
            report.val_loss.append(res.loss)
            value = _selection_value(res, cfg.selection)
        else:
            value = report.train_loss[-1]
        report.val_metric.append(float(value))
        if log is not None:
            log(epoch, report.train_loss[-1], value)
        if value < best:
            best, best_params, waited = value, params.copy(), 0
            report.best_epoch = epoch
        else:
            waited += 1
            if waited >= cfg.patience:
                report.stopped_early = True
                break

    model.params = best_params
    report.params = best_params
    report.wall_clock = time.perf_counter() - started
    return report
