import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import Tiny
from mvar import numerics as nx
from mvar.model import identity_params, predict_step
from mvar.training import (AdamState, RolloutDataset, TrainConfig, adam_step, evaluate_loss,
                           make_sw_weights, rollout, sw_loss, train, valid_starts, write_loss_log)


def test_sw_weights_literal():
    assert make_sw_weights(8, 5, 0.1).tolist() == [5.0, 4.3, 3.6, 2.9, 2.2, 1.5, 0.8, 0.1]
    assert make_sw_weights(1).tolist() == [5.0]
    assert make_sw_weights(3, 2, 2).tolist() == [2.0, 2.0, 2.0]
    with pytest.raises(ValueError):
        make_sw_weights(0)
    with pytest.raises(ValueError):
        make_sw_weights(4, 0.1, 5)


@given(st.integers(2, 40), st.floats(0.01, 10), st.floats(0.01, 10))
def test_sw_weights_arithmetic(tau, a, b):
    hi, lo = max(a, b), min(a, b)
    w = make_sw_weights(tau, hi, lo)
    assert len(w) == tau
    assert w[0] == pytest.approx(hi) and w[-1] == pytest.approx(lo)
    assert np.allclose(np.diff(w), (lo - hi) / (tau - 1), atol=1e-11)


def test_sw_loss_hand_fixtures():
    z = np.zeros((2, 3))
    # one step, every squared error 4
    assert abs(sw_loss([z], [z + 2], [5.0]) - 4.0) <= 1e-9
    # step 1 error 1 everywhere, step 2 exact: 5*1 / (5 + 0.1)
    assert abs(sw_loss([z, z], [z + 1, z], [5.0, 0.1]) - 5 / 5.1) <= 1e-9
    # mean over entries: one entry off by 3 out of 6
    t = z.copy()
    t[0, 0] = 3
    assert abs(sw_loss([z], [t], [1.0]) - 9 / 6) <= 1e-9
    assert abs(sw_loss([z], [t], [1.0], kind="mae") - 3 / 6) <= 1e-9
    # weights 2 and 1, step errors 1 and 4: (2*1 + 1*4)/3 = 2
    assert abs(sw_loss([z, z], [z + 1, z + 2], [2.0, 1.0]) - 2.0) <= 1e-9


def test_sw_loss_shape_errors():
    z = np.zeros((2, 3))
    with pytest.raises(nx.ShapeError):
        sw_loss([z, z], [z], [1.0, 1.0])
    with pytest.raises(nx.ShapeError):
        sw_loss([z], [np.zeros((3, 2))], [1.0])


@settings(max_examples=30)
@given(st.floats(0.01, 100), st.integers(0, 1000))
def test_sw_loss_weight_scale_invariance(c, seed):
    rng = np.random.default_rng(seed)
    p, t = rng.normal(size=(2, 4, 3, 2))
    w = make_sw_weights(4)
    assert sw_loss(list(p), list(t), w * c) == pytest.approx(sw_loss(list(p), list(t), w), rel=1e-12)


def test_sw_loss_tracked_gradient():
    tape = nx.GradTape()
    p = tape.watch({"p": np.array([[1.0, 2.0]])})["p"]
    loss = sw_loss([p], [np.zeros((1, 2))], [1.0])
    g = tape.backward(loss)
    np.testing.assert_allclose(g["p"], [[1.0, 2.0]])  # d/dp mean(p^2) = p


def test_rollout_chains_predictions(tiny_nometeo):
    t = tiny_nometeo
    preds = rollout(t.states[0], t.states[1], t.params, t.hp, t.xy, 3)
    a = predict_step(t.states[0], t.states[1], t.params, t.hp, t.xy)
    b = predict_step(t.states[1], a.value, t.params, t.hp, t.xy)
    c = predict_step(a.value, b.value, t.params, t.hp, t.xy)
    for got, want in zip(preds, (a, b, c)):
        np.testing.assert_allclose(got.value, want.value, rtol=1e-13)


def test_rollout_identity_keeps_state(tiny):
    t = tiny
    p = identity_params(t.params)
    preds = rollout(t.states[0], t.states[1], p, t.hp, t.xy, 3, list(t.meteo[:4]), list(t.times[:3, None]))
    for x in preds:
        assert np.array_equal(x.value, t.states[1])


def test_rollout_meteo_length_checked(tiny):
    t = tiny
    with pytest.raises(ValueError):
        rollout(t.states[0], t.states[1], t.params, t.hp, t.xy, 3, list(t.meteo[:3]), list(t.times[:3, None]))


def test_valid_starts_respects_mask_and_bounds():
    mask = np.ones((40, 2, 2), dtype=bool)
    mask[20, 1, 0] = False
    s = valid_starts(mask, lead=3, tau=2, lo=0, hi=40)
    # needs s-3, s, s+3, s+6 all valid and inside [0, 40)
    assert s.min() == 3 and s.max() == 33
    for bad in (23, 20, 17, 14):
        assert bad not in s
    assert all(v in s for v in (13, 15, 16, 18, 19, 21))
    s2 = valid_starts(mask, 3, 2, lo=10, hi=30)
    assert s2.min() >= 13 and s2.max() + 6 < 30


def _dataset(t, tau=2, lead=1, poison=False, smooth=False):
    rng = np.random.default_rng(5)
    T = 30
    values = rng.normal(size=(T, t.hp.N, t.hp.D))
    if smooth:
        phase = rng.uniform(0, 2 * np.pi, size=(1, t.hp.N, t.hp.D))
        values = np.sin(0.4 * np.arange(T)[:, None, None] + phase)
    mask = np.ones_like(values, dtype=bool)
    if poison:
        values[15] = np.nan
        mask[15] = False
    starts = valid_starts(mask, lead, tau)
    times = np.datetime64("2023-01-01T00", "s") + np.arange(T) * np.timedelta64(1, "h")
    return RolloutDataset(values, starts, lead, tau, t.xy, times)


def test_invalid_targets_never_reach_the_loss(tiny_nometeo):
    # NaN-poisoned hours are excluded by the start filter, so training stays finite
    t = tiny_nometeo
    d = _dataset(t, poison=True)
    assert len(d) > 0
    cfg = TrainConfig(tau=2, epochs=2, batch_size=4, lr=1e-3)
    r = train(t.hp, cfg, d, d)
    assert all(np.isfinite(row["loss"]) for row in r.log)
    assert all(np.all(np.isfinite(v)) for v in r.params.values())


def test_adam_first_step_closed_form():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    g = {"w": np.array([0.3, -4.0, 0.0])}
    cfg = TrainConfig(lr=0.1, weight_decay=0.0)
    st_ = AdamState.zeros(p)
    adam_step(p, g, st_, cfg)
    # bias-corrected moments equal g and g^2, so the step is lr * g / (|g| + eps)
    want = np.array([1.0, -2.0, 0.5]) - 0.1 * g["w"] / (np.abs(g["w"]) + 1e-8)
    np.testing.assert_allclose(p["w"], want, rtol=1e-12)


def test_adam_decoupled_weight_decay():
    p = {"w": np.array([2.0])}
    cfg = TrainConfig(lr=0.1, weight_decay=0.5)
    adam_step(p, {"w": np.array([0.0])}, AdamState.zeros(p), cfg)
    np.testing.assert_allclose(p["w"], [2.0 * (1 - 0.05)])


def test_adam_second_step_closed_form():
    p = {"w": np.array([0.0])}
    cfg = TrainConfig(lr=1.0, weight_decay=0.0, adam_eps=0.0)
    s = AdamState.zeros(p)
    adam_step(p, {"w": np.array([1.0])}, s, cfg)
    adam_step(p, {"w": np.array([3.0])}, s, cfg)
    m = (0.9 * 0.1 * 1 + 0.1 * 3) / (1 - 0.81)
    v = (0.999 * 0.001 * 1 + 0.001 * 9) / (1 - 0.999 ** 2)
    np.testing.assert_allclose(p["w"], [-1.0 - m / np.sqrt(v)], rtol=1e-12)


def test_adam_rejects_non_finite_gradient():
    p = {"a": np.zeros(2), "b": np.zeros(2)}
    with pytest.raises(nx.NonFiniteError, match="'b'"):
        adam_step(p, {"a": np.zeros(2), "b": np.array([0.0, np.nan])}, AdamState.zeros(p), TrainConfig())


def test_training_is_deterministic(tiny_nometeo):
    t = tiny_nometeo
    d = _dataset(t)
    cfg = TrainConfig(tau=2, epochs=2, batch_size=5, lr=1e-3, seed=3)
    a = train(t.hp, cfg, d)
    b = train(t.hp, cfg, d)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert [r["loss"] for r in a.log] == [r["loss"] for r in b.log]


def test_training_reduces_loss_and_tracks_best(tiny_nometeo, tmp_path):
    t = tiny_nometeo
    d = _dataset(t, smooth=True).subset(np.arange(8))
    cfg = TrainConfig(tau=2, epochs=30, batch_size=8, lr=1e-2, weight_decay=0.0)
    r = train(t.hp, cfg, d)
    losses = [row["loss"] for row in r.log]
    assert losses[-1] < 0.8 * losses[0]
    w = make_sw_weights(2)
    assert evaluate_loss(r.best_params, t.hp, d, w) <= evaluate_loss(r.params, t.hp, d, w) + 1e-12 or \
        r.best_epoch == cfg.epochs
    write_loss_log(r.log, tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,split,loss" and len(lines) == 31


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(tau=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(w_max=0.1, w_min=5).validate()
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 1})
    m = TrainConfig.defaults_for(True)
    assert (m.epochs, m.batch_size) == (10, 8)
    assert TrainConfig.defaults_for(False).epochs == 20
    assert TrainConfig.defaults_for(True, epochs=3).epochs == 3


def test_empty_dataset_rejected(tiny_nometeo):
    t = tiny_nometeo
    d = _dataset(t)
    with pytest.raises(ValueError):
        train(t.hp, TrainConfig(tau=2), d.subset([]))
