import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpmtl import autodiff as ad
from dpmtl.loss import DpLossSpec, batch_loss, dp_batch_loss, dp_loss, dp_loss_rows

Z = np.log([0.5, 0.3, 0.2])


def test_spec_examples():
    for lam in (0.0, 0.3, 1.0):
        assert dp_loss(Z, 0, 0, lam) == pytest.approx(0.693147, abs=1e-6)
    assert dp_loss(Z, 1, 0, 0.4) == pytest.approx(0.999643, abs=1e-6)
    assert dp_loss(Z, 1, 0, 0.0) == pytest.approx(1.203973, abs=1e-6)
    assert dp_loss(Z, 1, 0, 1.0) == pytest.approx(0.693147, abs=1e-6)


def test_batch_examples():
    a = dp_loss(Z, 0, 0, 0.4)
    b = dp_loss(Z, 1, 0, 0.4)
    assert batch_loss([(Z, 0, 0)], 0.4) == a
    assert batch_loss([(Z, 1, 0), (Z, 1, 0)], 0.4) == pytest.approx(b)
    assert batch_loss([(Z, 0, 0), (Z, 1, 0)], 0.4) == pytest.approx((0.693147 + 0.999643) / 2, abs=1e-6)
    with pytest.raises(ValueError):
        batch_loss([], 0.5)


def test_argument_errors():
    with pytest.raises(ValueError):
        dp_loss(Z, 0, 0, 1.5)
    with pytest.raises(ValueError):
        DpLossSpec(-0.1)
    with pytest.raises(ValueError):
        dp_loss([1.0], 0, 0, 0.5)
    with pytest.raises(IndexError):
        dp_loss(Z, 3, 0, 0.5)


def test_no_cancellation_when_correct_is_certain():
    z = np.array([40.0, 0.0, 0.0])
    v = dp_loss(z, 1, 0, 1.0)
    # -log(2 e^0 / (e^40 + 2)) computed exactly
    assert v == pytest.approx(40 + np.log1p(2 * np.exp(-40)) - np.log(2), rel=1e-14)


@settings(max_examples=200)
@given(st.integers(2, 7).flatmap(lambda j: st.tuples(
    st.lists(st.floats(-20, 20), min_size=j, max_size=j), st.integers(0, j - 1), st.integers(0, j - 1),
    st.floats(0, 1))))
def test_identities(case):
    z, c, r, lam = case
    z = np.array(z)
    v = dp_loss(z, c, r, lam)
    assert v >= -1e-12
    assert v == pytest.approx(lam * dp_loss(z, c, r, 1.0) + (1 - lam) * dp_loss(z, c, r, 0.0), abs=1e-12)
    lse = np.logaddexp.reduce(z)
    assert dp_loss(z, c, r, 0.0) == pytest.approx(lse - z[c], abs=1e-12)
    # binary cross-entropy on correctness, log(1 - p_correct) taken in log space
    log_p = z[r] - lse
    log_q = np.logaddexp.reduce(np.delete(z, r)) - lse
    bce = -log_p if c == r else -log_q
    assert dp_loss(z, c, r, 1.0) == pytest.approx(bce, abs=1e-12)


def test_tape_loss_matches_scalar_loss():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((6, 4))
    valid = np.ones((6, 4), bool)
    valid[0, 3] = valid[1, 2:] = False
    chosen = np.array([1, 0, 3, 2, 0, 1])
    correct = np.array([1, 1, 0, 2, 3, 0])
    t = ad.Tape(grad=False)
    rows = dp_loss_rows(t.constant(z), valid, chosen, correct, 0.3).value
    for k in range(6):
        assert rows[k] == pytest.approx(dp_loss(z[k][valid[k]], chosen[k], correct[k], 0.3), abs=1e-12)
    assert dp_batch_loss(t.constant(z), valid, chosen, correct, 0.3).value == pytest.approx(rows.mean())


def test_lambda_term_gradient_is_shared_across_incorrect_options():
    # incorrect record; d/dlam of gradient is the same on every incorrect option with equal logits
    z = np.array([1.0, 0.2, 0.2, 0.2])

    def grad(lam):
        _, g = ad.value_and_grad(
            lambda t, p: dp_batch_loss(p["z"], np.ones((1, 4), bool), [1], [0], lam), {"z": z[None]})
        return g["z"][0]

    diff = grad(1.0) - grad(0.0)
    assert diff[2] == pytest.approx(diff[3], abs=1e-15)
    # at lam=1 the loss gap between incorrect options has no gradient pull apart
    g1 = grad(1.0)
    assert g1[1] == pytest.approx(g1[2], abs=1e-15) and g1[2] == pytest.approx(g1[3], abs=1e-15)
