"""Reading interaction/score CSV files, sparsity masking, filtering and splits.

Interaction CSV::

    user,item,chosen,correct[,position]
    #options 3 5          <- optional: item 3 has 5 options
    0,0,1,1

Score CSV::

    user,score
    0,512.5
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import IO, Iterable, Mapping

import numpy as np

from .data import Dataset, Violation, validate_dataset
from .rng import make_rng

INTERACTION_HEADER = ["user", "item", "chosen", "correct"]
SCORE_HEADER = ["user", "score"]


class ParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DatasetValidationError(ValueError):
    def __init__(self, violations: list[Violation]):
        head = "; ".join(v.message for v in violations[:5])
        more = f" (+{len(violations) - 5} more)" if len(violations) > 5 else ""
        super().__init__(f"{len(violations)} dataset violation(s): {head}{more}")
        self.violations = violations


class FilterError(ValueError):
    pass


def _text_lines(stream) -> Iterable[str]:
    if isinstance(stream, (bytes, bytearray)):
        stream = io.BytesIO(stream)
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    if isinstance(stream, io.IOBase) and not isinstance(stream, io.TextIOBase):
        stream = io.TextIOWrapper(stream, encoding="utf-8", newline="")
    for line in stream:
        yield line.rstrip("\r\n")


def _int(text: str, line: int, field: str) -> int:
    try:
        v = int(text.strip())
    except ValueError:
        raise ParseError(line, f"{field} is not an integer: {text!r}") from None
    if v < 0:
        raise ParseError(line, f"{field} must be non-negative, got {v}")
    return v


def parse_interactions(stream, name: str = "") -> Dataset:
    """Parse an interaction CSV (bytes, text or a file object) into a Dataset.

    User, item and option counts are ``max index + 1`` unless ``#options``
    directives declare more options for an item.
    """
    header = None
    rows: list[tuple[int, ...]] = []
    declared: dict[int, int] = {}
    for lineno, line in enumerate(_text_lines(stream), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if parts and parts[0] == "options":
                if len(parts) != 3:
                    raise ParseError(lineno, "expected '#options item_id count'")
                declared[_int(parts[1], lineno, "item_id")] = _int(parts[2], lineno, "count")
            continue
        fields = next(csv.reader([line]))
        if header is None:
            header = [f.strip() for f in fields]
            if header not in (INTERACTION_HEADER, INTERACTION_HEADER + ["position"]):
                raise ParseError(lineno, f"bad header {header}, expected {','.join(INTERACTION_HEADER)}[,position]")
            continue
        if len(fields) != len(header):
            raise ParseError(lineno, f"expected {len(header)} fields, got {len(fields)}")
        rows.append(tuple(_int(f, lineno, h) for f, h in zip(fields, header)))
    if header is None:
        raise ParseError(1, "missing header")

    arr = np.array(rows, dtype=np.int64).reshape(-1, len(header))
    users, items, chosen, correct = arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]
    n = int(users.max()) + 1 if len(arr) else 0
    m = max([int(items.max()) + 1 if len(arr) else 0] + [i + 1 for i in declared])
    opts = np.zeros(m, dtype=np.int64)
    if len(arr):
        np.maximum.at(opts, items, np.maximum(chosen, correct) + 1)
    for i, c in declared.items():
        opts[i] = max(opts[i], c)
    d = Dataset(
        num_users=n,
        num_items=m,
        options_per_item=opts,
        users=users,
        items=items,
        chosen=chosen,
        correct=correct,
        positions=arr[:, 4] if len(header) == 5 else None,
        name=name,
    )
    problems = validate_dataset(d)
    if problems:
        raise DatasetValidationError(problems)
    return d


def parse_scores(stream) -> dict[int, float]:
    out: dict[int, float] = {}
    header = None
    for lineno, line in enumerate(_text_lines(stream), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = [f.strip() for f in next(csv.reader([line]))]
        if header is None:
            if fields != SCORE_HEADER:
                raise ParseError(lineno, f"bad header {fields}, expected user,score")
            header = fields
            continue
        if len(fields) != 2:
            raise ParseError(lineno, f"expected 2 fields, got {len(fields)}")
        u = _int(fields[0], lineno, "user")
        try:
            s = float(fields[1])
        except ValueError:
            raise ParseError(lineno, f"score is not a number: {fields[1]!r}") from None
        if not math.isfinite(s):
            raise ParseError(lineno, "score must be finite")
        if u in out:
            raise ParseError(lineno, f"duplicate score for user {u}")
        out[u] = s
    if header is None:
        raise ParseError(1, "missing header")
    return out


def load_dataset(path, scores_path=None) -> Dataset:
    path = Path(path)
    with open(path, "rb") as fh:
        d = parse_interactions(fh, name=path.stem)
    if scores_path is not None:
        with open(scores_path, "rb") as fh:
            scores = parse_scores(fh)
        n = max(d.num_users, max(scores, default=-1) + 1)
        d = Dataset(n, d.num_items, d.options_per_item, d.users, d.items, d.chosen, d.correct,
                    d.positions, scores, d.name)
    return d


def write_interactions(d: Dataset, stream: IO[str]) -> None:
    cols = INTERACTION_HEADER + (["position"] if d.positions is not None else [])
    stream.write(",".join(cols) + "\n")
    for i, c in enumerate(d.options_per_item.tolist()):
        stream.write(f"#options {i} {c}\n")
    data = [d.users, d.items, d.chosen, d.correct] + ([d.positions] if d.positions is not None else [])
    for row in zip(*(a.tolist() for a in data)):
        stream.write(",".join(map(str, row)) + "\n")


def write_scores(scores: Mapping[int, float], stream: IO[str]) -> None:
    stream.write("user,score\n")
    for u in sorted(scores):
        stream.write(f"{u},{scores[u]!r}\n")


# ---------------------------------------------------------------------------
# masking and filtering
# ---------------------------------------------------------------------------


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def apply_sparsity_mask(d: Dataset, drop_ratio: float, seed: int) -> Dataset:
    """Drop a fraction of interactions uniformly at random (without replacement)."""
    if not 0.0 <= drop_ratio < 1.0:
        raise ValueError(f"drop_ratio must lie in [0, 1), got {drop_ratio}")
    keep = _round_half_up((1.0 - drop_ratio) * len(d))
    if keep == len(d):
        return d
    idx = make_rng(seed, 0x5A).choice(len(d), size=keep, replace=False)
    return d.subset(np.sort(idx))


def _top(counts: np.ndarray, frac: float) -> np.ndarray:
    k = math.ceil(frac * len(counts) - 1e-9)
    # stable sort on -count keeps the lower index first among ties
    return np.sort(np.argsort(-counts, kind="stable")[:k])


def top_n_filter(d: Dataset, item_frac: float, user_frac: float) -> Dataset:
    """Keep the most answered items and the most active users, re-indexed densely."""
    for f in (item_frac, user_frac):
        if not 0.0 < f <= 1.0:
            raise ValueError(f"fractions must lie in (0, 1], got {f}")
    items = _top(np.bincount(d.items, minlength=d.num_items), item_frac)
    users = _top(np.bincount(d.users, minlength=d.num_users), user_frac)
    keep = np.isin(d.items, items) & np.isin(d.users, users)
    if not keep.any():
        raise FilterError("top-N filter left no interactions")
    user_map = np.full(d.num_users, -1, dtype=np.int64)
    user_map[users] = np.arange(len(users))
    item_map = np.full(d.num_items, -1, dtype=np.int64)
    item_map[items] = np.arange(len(items))
    scores = None
    if d.scores is not None:
        scores = {int(user_map[u]): s for u, s in d.scores.items() if u < d.num_users and user_map[u] >= 0}
    return Dataset(
        num_users=len(users),
        num_items=len(items),
        options_per_item=d.options_per_item[items],
        users=user_map[d.users[keep]],
        items=item_map[d.items[keep]],
        chosen=d.chosen[keep],
        correct=d.correct[keep],
        positions=None if d.positions is None else d.positions[keep],
        scores=scores,
        name=d.name,
    )


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


class SplitUnit(str, Enum):
    BY_INTERACTION = "by_interaction"
    BY_USER = "by_user"


@dataclass(frozen=True)
class SplitSpec:
    """Train/validation/test fractions.

    Validation or test may be empty (fraction 0); train may not.
    """

    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1
    unit: SplitUnit = SplitUnit.BY_INTERACTION
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "unit", SplitUnit(self.unit))
        fr = (self.train_frac, self.val_frac, self.test_frac)
        if not 0.0 < self.train_frac <= 1.0 or not all(0.0 <= f < 1.0 for f in fr[1:]):
            raise ValueError(f"bad split fractions {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fr)}")


@dataclass(frozen=True)
class DatasetSplit:
    train: Dataset
    val: Dataset
    test: Dataset
    train_users: np.ndarray | None = None
    val_users: np.ndarray | None = None
    test_users: np.ndarray | None = None


def _part_sizes(count: np.ndarray, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-group (n_val, n_test) keeping at least one training element."""
    n_val = np.floor(count * spec.val_frac + 0.5).astype(np.int64)
    n_test = np.floor(count * spec.test_frac + 0.5).astype(np.int64)
    over = np.maximum(n_val + n_test - (count - 1), 0)
    cut_test = np.minimum(over, n_test)
    n_test -= cut_test
    n_val -= np.minimum(over - cut_test, n_val)
    return np.maximum(n_val, 0), np.maximum(n_test, 0)


def split_users(users, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shuffle ``users`` and cut into train/val/test lists (each sorted)."""
    users = np.asarray(users, dtype=np.int64)
    perm = users[make_rng(spec.seed, 0x05).permutation(len(users))]
    n_val, n_test = _part_sizes(np.array([len(users)]), spec)
    n_val, n_test = int(n_val[0]), int(n_test[0])
    n_train = len(users) - n_val - n_test
    return (
        np.sort(perm[:n_train]),
        np.sort(perm[n_train : n_train + n_val]),
        np.sort(perm[n_train + n_val :]),
    )


def split_dataset(d: Dataset, s: SplitSpec) -> DatasetSplit:
    """Disjoint, exhaustive train/val/test partition of ``d``'s interactions.

    ``by_interaction`` stratifies per user: each user's responses are
    shuffled and cut by the fractions, always leaving at least one in train
    (a single-response user goes entirely to train).  ``by_user`` assigns
    whole users.
    """
    if s.unit is SplitUnit.BY_USER:
        tr, va, te = split_users(np.arange(d.num_users), s)
        part = np.zeros(d.num_users, dtype=np.int64)
        part[va], part[te] = 1, 2
        assign = part[d.users]
        return DatasetSplit(
            *(d.subset(np.flatnonzero(assign == k)) for k in range(3)), train_users=tr, val_users=va, test_users=te
        )

    rng = make_rng(s.seed, 0x17)
    keys = rng.random(len(d))
    order = np.lexsort((keys, d.users))
    sorted_users = d.users[order]
    starts = np.searchsorted(sorted_users, sorted_users, side="left")
    rank = np.arange(len(d)) - starts
    count = np.bincount(d.users, minlength=d.num_users)
    n_val, n_test = _part_sizes(count, s)
    n_train = count - n_val - n_test
    u = sorted_users
    part_sorted = np.where(rank < n_train[u], 0, np.where(rank < n_train[u] + n_val[u], 1, 2))
    assign = np.empty(len(d), dtype=np.int64)
    assign[order] = part_sorted
    return DatasetSplit(*(d.subset(np.flatnonzero(assign == k)) for k in range(3)))
