import numpy as np
import pytest

from dpmtl.gradcheck import check_model
from dpmtl.ingestion import SplitSpec, split_dataset
from dpmtl.metrics import roc_auc
from dpmtl.models import DpIrt, ParameterStore, build_model
from dpmtl.synthgen import GenConfig, generate_dataset
from dpmtl.training import AdamState, TrainConfig, TrainingDiverged, adam_step, evaluate, train

from conftest import make_dataset


def _p(v):
    return ParameterStore(w=np.array(v, dtype=float))


def test_adam_zero_gradient():
    p = _p([1.0, -2.0])
    st = AdamState({"w": np.array([0.5, 0.5])}, {"w": np.array([0.1, 0.1])}, t=3)
    new, st2 = adam_step(p, {"w": np.zeros(2)}, st)
    np.testing.assert_allclose(new["w"], p["w"], atol=1e-2)
    np.testing.assert_allclose(st2.m["w"], 0.45)
    np.testing.assert_allclose(st2.v["w"], 0.0999)
    # from a zero state nothing moves at all
    new, _ = adam_step(p, {"w": np.zeros(2)}, AdamState.zeros_like(p))
    assert np.array_equal(new["w"], p["w"])


def test_adam_first_step():
    new, st = adam_step(_p([0.0]), {"w": np.array([0.5])}, AdamState.zeros_like(_p([0.0])), lr=0.01)
    assert new["w"][0] == pytest.approx(-0.01, rel=1e-6)
    assert st.t == 1


def test_adam_constant_gradient_step_converges_to_lr():
    p, st = _p([0.0]), AdamState.zeros_like(_p([0.0]))
    for _ in range(3000):
        prev = p["w"][0]
        p, st = adam_step(p, {"w": np.array([2.0])}, st, lr=0.001)
    assert prev - p["w"][0] == pytest.approx(0.001, rel=1e-6)


def test_adam_rejects_non_finite():
    with pytest.raises(FloatingPointError, match="w"):
        adam_step(_p([0.0]), {"w": np.array([np.nan])}, AdamState.zeros_like(_p([0.0])))


def test_adam_does_not_mutate_inputs():
    p = _p([1.0])
    st = AdamState.zeros_like(p)
    adam_step(p, {"w": np.array([1.0])}, st)
    assert p["w"][0] == 1.0 and st.t == 0 and st.m["w"][0] == 0.0


def test_overfit_single_record():
    data = make_dataset([(0, 0, 1, 1)], [2])
    m = DpIrt(1, [2], dim=2, seed=0)
    rep = train(m, data, None, TrainConfig(lam=1.0, lr=0.05, max_epochs=200, patience=200))
    losses = np.array(rep.train_loss)
    assert np.all(np.diff(losses) <= 1e-12)
    assert losses[-1] < 1e-2


def test_lambda_irrelevant_when_all_answers_correct():
    rng = np.random.default_rng(0)
    rows = [(u, i, 0, 0) for u in range(8) for i in range(5) if rng.random() < 0.8]
    data = make_dataset(rows, [3] * 5, num_users=8)
    cfg = dict(lr=0.01, max_epochs=15, patience=20, batch_size=7, seed=3)
    a = train(DpIrt(8, [3] * 5, dim=2, seed=1), data, None, TrainConfig(lam=0.0, **cfg))
    b = train(DpIrt(8, [3] * 5, dim=2, seed=1), data, None, TrainConfig(lam=1.0, **cfg))
    assert a.train_loss == b.train_loss
    assert np.array_equal(a.params.flatten(), b.params.flatten())


def test_lambda_changes_training_with_incorrect_answers(small_synth):
    data, _ = small_synth
    cfg = dict(lr=0.01, max_epochs=2, patience=5, seed=3)
    a = train(build_model("irt", data, 2), data, None, TrainConfig(lam=0.0, **cfg))
    b = train(build_model("irt", data, 2), data, None, TrainConfig(lam=1.0, **cfg))
    assert a.train_loss != b.train_loss


@pytest.mark.parametrize("family", ["irt", "nmf", "bidkt"])
def test_training_is_deterministic(family, small_synth):
    data, _ = small_synth
    s = split_dataset(data, SplitSpec(0.8, 0.1, 0.1, seed=0))
    cfg = TrainConfig(lr=0.01, max_epochs=2, seed=4)
    reps = [train(build_model(family, data, 3, layers=1, seed=2), s.train, s.val, cfg) for _ in range(2)]
    assert reps[0].to_json(include_wall_clock=False) == reps[1].to_json(include_wall_clock=False)
    assert np.array_equal(reps[0].params.flatten(), reps[1].params.flatten())


def test_early_stopping_restores_best(small_synth):
    data, _ = small_synth
    s = split_dataset(data, SplitSpec(0.8, 0.1, 0.1, seed=0))
    m = build_model("irt", data, 4)
    rep = train(m, s.train, s.val, TrainConfig(lr=0.2, max_epochs=60, patience=3))
    assert rep.stopped_early
    assert evaluate(m, s.val, 0.5).loss == pytest.approx(min(rep.val_loss))
    assert rep.val_loss[rep.best_epoch] == min(rep.val_loss)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch_and_batch(small_synth):
    data, _ = small_synth
    m = build_model("irt", data, 2)
    m.params["user"][:] = 1e154
    m.params["option"][:] = 1e154
    with pytest.raises(TrainingDiverged) as exc:
        train(m, data, None, TrainConfig(max_epochs=2))
    assert exc.value.epoch == 0 and exc.value.batch == 0


def test_evaluate_perfect_and_uniform_models():
    rows = [(0, 0, 0, 0), (0, 1, 1, 0), (1, 0, 1, 0), (1, 1, 1, 0)]
    data = make_dataset(rows, [3, 3], num_users=2)
    m = DpIrt(2, [3, 3], dim=2, bias=True)
    m.params["user"][:] = 0
    m.params["option"][:] = 0
    res = evaluate(m, data)
    assert res.ot_acc == pytest.approx(np.mean([1, 0, 0, 0]))  # argmax ties to option 0
    assert res.kt_auc == 0.5
    # a model that puts almost all mass on the chosen option
    m.params["user"][:] = [[1, 0], [0, 1]]
    off = m.layout.offsets
    for u, i, c, _ in rows:
        m.params["option"][off[i] + c] += 10 * m.params["user"][u]
    res = evaluate(m, data)
    assert res.ot_acc == 1.0 and res.kt_auc == 1.0


def test_evaluate_one_class_auc_is_absent():
    data = make_dataset([(0, 0, 1, 1), (1, 0, 1, 1)], [2])
    assert evaluate(DpIrt(2, [2], dim=1), data).kt_auc is None


def test_synthetic_auc_beats_permutation_null():
    data, _ = generate_dataset(GenConfig(num_users=200, num_items=50, dim=2, seed=11))
    s = split_dataset(data, SplitSpec(0.8, 0.1, 0.1, seed=1))
    m = build_model("irt", data, 2)
    train(m, s.train, s.val, TrainConfig(lr=0.01, max_epochs=40, patience=5))
    p = m.predict_probs(s.val)[np.arange(len(s.val)), s.val.correct]
    auc = roc_auc(p, s.val.labels)
    rng = np.random.default_rng(0)
    null = [roc_auc(p, rng.permutation(s.val.labels)) for _ in range(200)]
    assert auc > 0.5 + 5 * np.std(null)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lam=2.0)
    with pytest.raises(ValueError):
        TrainConfig(selection="f1")
    with pytest.raises(ValueError):
        TrainConfig(lr=0)


@pytest.mark.parametrize("family", ["irt", "nmf", "bidkt"])
def test_gradcheck_spot(family):
    assert check_model(family, seed=1).error < 1e-4
