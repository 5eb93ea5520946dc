"""Core domain types: interactions, datasets and per-option predictions.

A dataset is stored column-wise (one numpy array per field) so that dense
exam matrices with millions of responses stay cheap.  ``Interaction``
objects are materialized on demand when iterating.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np


@dataclass(frozen=True)
class Interaction:
    """One response of ``user_id`` to ``item_id``.

    ``chosen`` and ``correct`` are option indices local to the item.  The
    correctness label is never stored; see :func:`correctness_label`.
    """

    user_id: int
    item_id: int
    chosen: int
    correct: int
    position: int | None = None

    def __post_init__(self):
        for name in ("user_id", "item_id", "chosen", "correct"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.position is not None and self.position < 0:
            raise ValueError(f"position must be non-negative, got {self.position}")

    @property
    def label(self) -> int:
        return correctness_label(self)


def correctness_label(x: Interaction) -> int:
    """1 if the chosen option is the correct one, else 0."""
    return int(x.chosen == x.correct)


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Users, items, per-item option counts and the observed interactions.

    Interaction columns are parallel arrays.  ``positions`` orders a user's
    responses for sequence models; when absent the item index is used.
    """

    num_users: int
    num_items: int
    options_per_item: np.ndarray
    users: np.ndarray
    items: np.ndarray
    chosen: np.ndarray
    correct: np.ndarray
    positions: np.ndarray | None = None
    scores: Mapping[int, float] | None = None
    name: str = field(default="", compare=False)

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "options_per_item", _frozen(self.options_per_item, np.int64))
        for col in ("users", "items", "chosen", "correct"):
            set_(self, col, _frozen(getattr(self, col), np.int64))
        n = len(self.users)
        if not (len(self.items) == len(self.chosen) == len(self.correct) == n):
            raise ValueError("interaction columns must have equal length")
        if self.positions is not None:
            set_(self, "positions", _frozen(self.positions, np.int64))
            if len(self.positions) != n:
                raise ValueError("positions column must match interaction count")
        if len(self.options_per_item) != self.num_items:
            raise ValueError(
                f"options_per_item has {len(self.options_per_item)} entries "
                f"for {self.num_items} items"
            )
        if self.scores is not None:
            set_(self, "scores", {int(k): float(v) for k, v in self.scores.items()})

    @classmethod
    def from_interactions(
        cls,
        num_users: int,
        num_items: int,
        options_per_item: Sequence[int],
        interactions: Iterable[Interaction],
        scores: Mapping[int, float] | None = None,
    ) -> "Dataset":
        xs = list(interactions)
        has_pos = any(x.position is not None for x in xs)
        return cls(
            num_users=num_users,
            num_items=num_items,
            options_per_item=options_per_item,
            users=[x.user_id for x in xs],
            items=[x.item_id for x in xs],
            chosen=[x.chosen for x in xs],
            correct=[x.correct for x in xs],
            positions=[x.position if x.position is not None else x.item_id for x in xs]
            if has_pos
            else None,
            scores=scores,
        )

    def __len__(self) -> int:
        return len(self.users)

    def __iter__(self) -> Iterator[Interaction]:
        pos = self.positions
        for k in range(len(self)):
            yield Interaction(
                int(self.users[k]),
                int(self.items[k]),
                int(self.chosen[k]),
                int(self.correct[k]),
                None if pos is None else int(pos[k]),
            )

    @property
    def interactions(self) -> list[Interaction]:
        return list(self)

    @property
    def labels(self) -> np.ndarray:
        return (self.chosen == self.correct).astype(np.int64)

    @property
    def order(self) -> np.ndarray:
        """Sequence position of each interaction (item index by default)."""
        return self.items if self.positions is None else self.positions

    @property
    def sparsity(self) -> float:
        cells = self.num_users * self.num_items
        return 1.0 - len(self) / cells if cells else 1.0

    def subset(self, index) -> "Dataset":
        """Dataset over the same index space keeping only ``index`` rows."""
        index = np.asarray(index)
        return Dataset(
            num_users=self.num_users,
            num_items=self.num_items,
            options_per_item=self.options_per_item,
            users=self.users[index],
            items=self.items[index],
            chosen=self.chosen[index],
            correct=self.correct[index],
            positions=None if self.positions is None else self.positions[index],
            scores=self.scores,
            name=self.name,
        )

    def with_scores(self, scores: Mapping[int, float] | None) -> "Dataset":
        return Dataset(
            self.num_users,
            self.num_items,
            self.options_per_item,
            self.users,
            self.items,
            self.chosen,
            self.correct,
            self.positions,
            scores,
            self.name,
        )

    def item_correct(self) -> np.ndarray:
        """Correct option per item as seen in the data, -1 for unseen items."""
        out = np.full(self.num_items, -1, dtype=np.int64)
        out[self.items] = self.correct
        return out

    def key_set(self) -> set[tuple[int, int]]:
        return set(zip(self.users.tolist(), self.items.tolist()))


@dataclass(frozen=True)
class Violation:
    kind: str
    row: int | None
    message: str


def validate_dataset(d: Dataset) -> list[Violation]:
    """Return every invariant violation in ``d``; empty means valid.

    Rows are 0-based interaction indices.
    """
    out: list[Violation] = []
    opts = d.options_per_item
    for i in np.flatnonzero(opts < 2):
        out.append(Violation("option_count", None, f"item {i} has {opts[i]} options, need >= 2"))

    users, items, chosen, correct = d.users, d.items, d.chosen, d.correct
    bad_user = (users < 0) | (users >= d.num_users)
    bad_item = (items < 0) | (items >= d.num_items)
    j = np.zeros(len(d), dtype=np.int64)
    j[~bad_item] = opts[items[~bad_item]]
    bad_chosen = ~bad_item & ((chosen < 0) | (chosen >= j))
    bad_correct = ~bad_item & ((correct < 0) | (correct >= j))
    for k in np.flatnonzero(bad_user | bad_item | bad_chosen | bad_correct).tolist():
        u, i, c, r = int(users[k]), int(items[k]), int(chosen[k]), int(correct[k])
        if bad_user[k]:
            out.append(Violation("user_range", k, f"row {k}: user {u} not in [0, {d.num_users})"))
        if bad_item[k]:
            out.append(Violation("item_range", k, f"row {k}: item {i} not in [0, {d.num_items})"))
        if bad_chosen[k]:
            out.append(Violation("chosen_range", k, f"row {k}: chosen {c} not in [0, {j[k]}) for item {i}"))
        if bad_correct[k]:
            out.append(Violation("correct_range", k, f"row {k}: correct {r} not in [0, {j[k]}) for item {i}"))

    # lexsort keeps the first occurrence of each pair ahead of its repeats
    order = np.lexsort((np.arange(len(d)), items, users))
    same = (np.diff(users[order]) == 0) & (np.diff(items[order]) == 0)
    for pos in np.flatnonzero(same).tolist():
        k, prev = int(order[pos + 1]), int(order[pos])
        while pos > 0 and same[pos - 1]:
            pos -= 1
            prev = int(order[pos])
        out.append(
            Violation("duplicate", k, f"row {k}: pair (user={users[k]}, item={items[k]}) repeats row {prev}")
        )

    order = np.lexsort((np.arange(len(d)), items))
    starts = np.r_[True, np.diff(items[order]) != 0][: len(order)]
    head = order[np.maximum.accumulate(np.where(starts, np.arange(len(order)), 0))]
    for pos in np.flatnonzero(correct[order] != correct[head]).tolist():
        k, h = int(order[pos]), int(head[pos])
        out.append(
            Violation(
                "correct_mismatch",
                k,
                f"row {k}: item {items[k]} has correct option {correct[k]}, row {h} says {correct[h]}",
            )
        )

    if d.scores is not None:
        for u in d.scores:
            if not 0 <= u < d.num_users:
                out.append(Violation("score_user", None, f"score for unknown user {u}"))
    return out


@dataclass(frozen=True, eq=False)
class OptionPrediction:
    """Predicted option distribution for one (user, item) query."""

    probs: np.ndarray
    correct_index: int

    def __post_init__(self):
        p = _frozen(self.probs, np.float64)
        object.__setattr__(self, "probs", p)
        if p.ndim != 1 or len(p) < 1:
            raise ValueError("probs must be a non-empty vector")
        if not 0 <= self.correct_index < len(p):
            raise ValueError(f"correct_index {self.correct_index} out of range for {len(p)} options")
        if np.any(p < 0) or np.any(p > 1) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"not a probability vector: {p}")

    @property
    def p_correct(self) -> float:
        return float(self.probs[self.correct_index])

    @property
    def argmax(self) -> int:
        # np.argmax returns the first maximum: ties go to the lowest index
        return int(np.argmax(self.probs))
