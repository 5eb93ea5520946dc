"""Finite-difference checks of the three models on small random problems."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .loss import dp_batch_loss
from .models import ParameterStore, build_model
from .rng import make_rng


@dataclass(frozen=True)
class GradcheckCase:
    family: str
    seed: int
    dim: int
    layers: int
    error: float


def random_problem(seed: int, max_users: int = 3, max_items: int = 6, max_options: int = 6) -> Dataset:
    """A tiny dataset: every user answers a random subset of items (at most ``max_items``)."""
    rng = make_rng(seed, 0x6C)
    n = int(rng.integers(1, max_users + 1))
    m = int(rng.integers(1, max_items + 1))
    opts = rng.integers(2, max_options + 1, size=m)
    correct_of = np.array([rng.integers(o) for o in opts])
    users, items = [], []
    for u in range(n):
        k = int(rng.integers(1, m + 1))
        for i in np.sort(rng.choice(m, size=k, replace=False)):
            users.append(u)
            items.append(int(i))
    items_a = np.array(items)
    chosen = np.array([rng.integers(opts[i]) for i in items_a])
    return Dataset(n, m, opts, users, items_a, chosen, correct_of[items_a])


def check_model(family: str, seed: int, dim: int | None = None, layers: int | None = None,
                lam: float | None = None, epsilon: float = 1e-5,
                max_coords: int | None = None, scale: float = 0.5) -> GradcheckCase:
    """Max relative gradient error of ``family`` on a random problem.

    Parameters are redrawn from N(0, 0.5^2) so no unit sits in a saturated
    or near-zero-gradient regime by construction.  The checked scalar is
    the DP loss plus a random linear functional of the valid logits: the
    loss alone is invariant to shifting all of a row's logits, which gives
    some parameters a gradient that is exactly zero in theory and pure
    rounding noise in the finite difference.
    """
    rng = make_rng(seed, 0x6D)
    data = random_problem(seed)
    dim = int(rng.integers(1, 9)) if dim is None else dim
    if layers is None:
        # deeper LSTM stacks push some gradients to ~1e-7, below what a
        # central difference at epsilon=1e-5 resolves to 1e-4 relative
        layers = int(rng.integers(1, 3 if family == "bidkt" else 5))
    lam = float(rng.uniform()) if lam is None else lam
    model = build_model(family, data, dim=dim, layers=layers if family != "irt" else 1, seed=seed)
    model.set_context(data)
    params = ParameterStore({k: scale * rng.standard_normal(v.shape) for k, v in model.params.items()})
    batch = next(model.batches(data, len(data)))
    valid = model.valid(batch)
    probe = np.where(valid, rng.standard_normal(valid.shape), 0.0)

    def objective(tape, leaves):
        z = model.logits(leaves, batch)
        loss = dp_batch_loss(z, valid, batch.chosen, batch.correct, lam)
        return ad.add(loss, ad.sum(ad.multiply(z, probe)))

    err = ad.check_gradients(objective, params, epsilon=epsilon, max_coords=max_coords, seed=seed)
    return GradcheckCase(family, seed, dim, layers, err)


def run_gradchecks(families=("irt", "nmf", "bidkt"), seeds=range(20),
                   max_coords: int | None = None) -> list[GradcheckCase]:
    return [check_model(f, s, max_coords=max_coords) for f in families for s in seeds]
