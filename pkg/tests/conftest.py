import numpy as np
import pytest

from dpmtl.data import Dataset
from dpmtl.synthgen import GenConfig, generate_dataset


def make_dataset(rows, options, num_users=None, scores=None, positions=None):
    """Dataset from (user, item, chosen, correct) tuples."""
    rows = np.asarray(rows, dtype=np.int64).reshape(-1, 4)
    n = num_users if num_users is not None else (int(rows[:, 0].max()) + 1 if len(rows) else 0)
    return Dataset(n, len(options), options, rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3],
                   positions=positions, scores=scores)


@pytest.fixture
def toy():
    # 3 users, 3 items with 3, 4 and 2 options
    rows = [
        (0, 0, 1, 1), (0, 1, 0, 2), (0, 2, 1, 0),
        (1, 0, 2, 1), (1, 1, 2, 2),
        (2, 0, 1, 1), (2, 1, 3, 2), (2, 2, 0, 0),
    ]
    return make_dataset(rows, [3, 4, 2], scores={0: 10.0, 1: 20.0, 2: 30.0})


@pytest.fixture(scope="session")
def small_synth():
    return generate_dataset(GenConfig(num_users=120, num_items=20, options=4, dim=2, score_noise=5.0, seed=3))


def remap_options(data, item, perm):
    """Relabel item ``item``'s options so new option k is old option ``perm[k]``."""
    inv = np.argsort(perm)
    hit = data.items == item
    chosen, correct = data.chosen.copy(), data.correct.copy()
    chosen[hit] = inv[chosen[hit]]
    correct[hit] = inv[correct[hit]]
    return Dataset(data.num_users, data.num_items, data.options_per_item, data.users, data.items,
                   chosen, correct, positions=data.positions, scores=data.scores)


def permutation_error(model, data, item, perm):
    """Max |p'(k) - p(perm[k])| over every query on ``item`` after permuting its options."""
    perm = np.asarray(perm)
    rows = np.flatnonzero(data.items == item)
    query = data.subset(rows)
    model.set_context(data)
    before = model.predict_probs(query)
    moved = model.permute_options(item, perm)
    moved.set_context(remap_options(data, item, perm))
    after = moved.predict_probs(remap_options(query, item, perm))
    j = int(data.options_per_item[item])
    return float(np.max(np.abs(after[:, :j] - before[:, perm]))) if len(rows) else 0.0


CRITERIA_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES, key=lambda s: int(s.split("]")[0].split()[-1])):
            terminalreporter.write_line(line)
