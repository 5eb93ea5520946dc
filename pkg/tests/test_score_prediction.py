import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpmtl.score_prediction import (
    IsotonicStep,
    SpModel,
    fit_isotonic,
    fit_linear,
    fit_sp,
    pava,
    predict_score,
    sp_evaluate,
)


def test_fit_linear_examples():
    w, b, bad = fit_linear([[1.0], [2.0]], [2.0, 4.0])
    assert w[0] == pytest.approx(2.0) and b == pytest.approx(0.0, abs=1e-12) and not bad
    w, b, bad = fit_linear(np.random.default_rng(0).standard_normal((20, 3)), np.full(20, 7.0))
    np.testing.assert_allclose(w, 0, atol=1e-12)
    assert b == pytest.approx(7.0)


def test_fit_linear_rank_deficient_is_flagged():
    x = np.ones((5, 2))
    w, b, bad = fit_linear(x, np.arange(5.0))
    assert bad and np.all(np.isfinite(w))
    with pytest.raises(ValueError):
        fit_linear(np.zeros((0, 2)), [])


def test_isotonic_examples():
    f = fit_isotonic([1, 2, 3], [1, 2, 3])
    np.testing.assert_array_equal(f.knots_y, [1, 2, 3])
    f = fit_isotonic([1, 2, 3], [1, 3, 2])
    np.testing.assert_allclose(f.knots_y, [1, 2.5, 2.5])
    f = fit_isotonic([0, 5, 9], [4, 4, 4])
    np.testing.assert_array_equal(f.knots_y, [4, 4, 4])


def test_isotonic_pools_equal_inputs():
    f = fit_isotonic([1, 1, 2], [0, 4, 3])
    np.testing.assert_array_equal(f.knots_x, [1, 2])
    np.testing.assert_allclose(f.knots_y, [2, 3])


def test_step_interpolation_and_clamp():
    s = IsotonicStep([0.0, 1.0], [100.0, 200.0])
    assert s(0.5) == 150.0
    assert s(-3.0) == 100.0 and s(9.0) == 200.0
    with pytest.raises(ValueError):
        IsotonicStep([0.0, 0.0], [1.0, 2.0])


def _brute_isotonic(y, grid):
    best = np.inf
    for cand in itertools.product(grid, repeat=len(y)):
        if all(a <= b for a, b in zip(cand, cand[1:])):
            err = sum((c - v) ** 2 for c, v in zip(cand, y))
            if err < best:
                best = err
    return best


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=6))
def test_pava_beats_grid_search(y):
    # PAVA is the exact optimum, so it can only tie or beat a grid-restricted search
    y = np.array(y, float)
    fit = pava(y)
    assert np.all(np.diff(fit) >= 0)
    assert ((fit - y) ** 2).sum() <= _brute_isotonic(y, range(5)) + 1e-9


def test_predict_score_at_training_point():
    theta = np.array([[0.0], [1.0], [2.0]])
    m = fit_sp(theta, [10.0, 20.0, 30.0])
    assert predict_score(theta[1], m) == pytest.approx(20.0)
    back = SpModel.from_json(m.to_json())
    assert predict_score(theta[2], back) == predict_score(theta[2], m)


def test_sp_evaluate_identical_users_and_linear_scores():
    rng = np.random.default_rng(0)
    theta = rng.standard_normal((40, 3))
    scores = theta @ np.array([10.0, -5.0, 2.0]) + 500
    # duplicate rows: test users are copies of train users
    theta2 = np.vstack([theta, theta])
    scores2 = np.concatenate([scores, scores])
    assert sp_evaluate(theta2, scores2, range(40), range(40, 80)) == pytest.approx(0, abs=1e-9)
    assert sp_evaluate(theta, scores, np.arange(40)[::2], np.arange(40)[1::2]) < 5.0


def test_sp_rejects_overlap_and_empty():
    th = np.zeros((4, 1))
    with pytest.raises(ValueError):
        sp_evaluate(th, np.zeros(4), [0, 1], [1, 2])
    with pytest.raises(ValueError):
        sp_evaluate(th, np.zeros(4), [0, 1], [])
