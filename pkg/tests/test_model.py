import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import reference_model as ref
from conftest import Tiny, tiny_hp
from mvar import numerics as nx
from mvar.model import (HyperParams, encode_meteo, grid_coords, identity_params, init_params,
                        multi_head_attention, param_shapes, predict_step, time_encoding)


def _run(t: Tiny, x_prev, x_curr, meteo=True, trace=None):
    pair = (t.meteo[0], t.meteo[1]) if t.hp.use_meteo and meteo else None
    time = t.times[:1] if pair is not None else None
    return predict_step(x_prev, x_curr, t.params, t.hp, t.xy, pair, time, trace).value


@pytest.mark.parametrize("use_meteo", [False, True])
def test_matches_straight_line_reference(use_meteo):
    t = Tiny(use_meteo=use_meteo)
    got = _run(t, t.states[0], t.states[1])
    # 2023-03-01T06Z: hour 6, day-of-year 59 + 6/24
    want = ref.step(t.states[0], t.states[1], t.params, t.hp, t.latlon,
                    (t.meteo[0], t.meteo[1]) if use_meteo else None, hour=6.0, doy=59.25)
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


def test_attention_matches_loop_oracle():
    rng = np.random.default_rng(3)
    xq, xkv = rng.normal(size=(5, 8)), rng.normal(size=(7, 6))
    wq, wk, wv = rng.normal(size=(8, 8)), rng.normal(size=(6, 8)), rng.normal(size=(6, 8))
    log = []
    q, z = multi_head_attention(xq[None], xkv[None], wq, wk, wv, 2, log)
    rq, rz, ra = ref.attention_loop(xq, xkv, wq, wk, wv, 2)
    np.testing.assert_allclose(q.value[0], rq, rtol=1e-12)
    np.testing.assert_allclose(z.value[0], rz, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(log[0][0], np.stack(ra), rtol=1e-10, atol=1e-14)


@pytest.mark.parametrize("use_meteo", [False, True])
def test_residual_identity_exact(use_meteo):
    t = Tiny(use_meteo=use_meteo)
    t.params = identity_params(t.params)
    x = t.states[1]
    assert np.array_equal(_run(t, t.states[0], x), x)


@pytest.mark.parametrize("use_meteo", [False, True])
def test_permutation_equivariance(use_meteo):
    t = Tiny(use_meteo=use_meteo)
    base = _run(t, t.states[0], t.states[1])
    for seed in range(3):
        perm = np.random.default_rng(seed).permutation(t.hp.N)
        t2 = Tiny(use_meteo=use_meteo)
        t2.xy = t.xy[perm]
        out = _run(t2, t.states[0][perm], t.states[1][perm])
        np.testing.assert_allclose(out, base[perm], rtol=0, atol=1e-12)


@pytest.mark.parametrize("use_meteo", [False, True])
def test_attention_rows_sum_to_one(use_meteo):
    t = Tiny(use_meteo=use_meteo)
    tr = {}
    _run(t, t.states[0] * 5, t.states[1] * 5, trace=tr)
    # sa0 + (cross, self) per block
    assert len(tr["attention"]) == 1 + 2 * t.hp.L
    for a in tr["attention"]:
        assert np.all(np.abs(a.sum(-1) - 1.0) <= 1e-12)


def test_batched_equals_unbatched(tiny):
    t = tiny
    single = [predict_step(t.states[i], t.states[i + 1], t.params, t.hp, t.xy,
                           (t.meteo[i], t.meteo[i + 1]), t.times[i:i + 1]).value for i in range(3)]
    batch = predict_step(t.states[0:3], t.states[1:4], t.params, t.hp, t.xy,
                         (t.meteo[0:3], t.meteo[1:4]), t.times[:3]).value
    np.testing.assert_allclose(batch, np.stack(single), rtol=1e-12, atol=1e-13)


def test_meteo_free_never_reads_meteo(tiny_nometeo):
    t = tiny_nometeo

    class Boom:
        def __getattr__(self, name):
            raise AssertionError("meteo was read")

        def __array__(self, *a, **k):
            raise AssertionError("meteo was read")

    a = predict_step(t.states[0], t.states[1], t.params, t.hp, t.xy, (Boom(), Boom()), Boom()).value
    b = predict_step(t.states[0], t.states[1], t.params, t.hp, t.xy).value
    assert np.array_equal(a, b)
    assert not any(k.startswith("ds") for k in t.params)


def test_meteo_mode_requires_pair(tiny):
    with pytest.raises(ValueError):
        predict_step(tiny.states[0], tiny.states[1], tiny.params, tiny.hp, tiny.xy)


def test_meteo_changes_prediction(tiny):
    t = tiny
    a = _run(t, t.states[0], t.states[1])
    t.meteo = t.meteo + 1.0
    assert not np.allclose(a, _run(t, t.states[0], t.states[1]))


def test_time_encoding_ablation(tiny):
    # different valid times give different meteo tokens; zeroing TE projections removes the effect
    t = tiny
    m = (nx.Tensor(t.meteo[:1]), nx.Tensor(t.meteo[1:2]))
    a = encode_meteo(*m, t.times[:1], t.params, t.hp).value
    b = encode_meteo(*m, t.times[1:2], t.params, t.hp).value
    assert not np.allclose(a, b)
    p = dict(t.params)
    for k in list(p):
        if ".te." in k:
            p[k] = np.zeros_like(p[k])
    a = encode_meteo(*m, t.times[:1], p, t.hp).value
    b = encode_meteo(*m, t.times[1:2], p, t.hp).value
    assert np.array_equal(a, b)


def test_time_encoding_values():
    e = time_encoding(np.array(["2023-01-01T06"], dtype="datetime64[s]"), 8)
    np.testing.assert_allclose(e[0, :2], np.sin(2 * np.pi * 6 / 24 * np.array([1, 2])), atol=1e-15)
    np.testing.assert_allclose(e[0, 2:4], np.cos(2 * np.pi * 6 / 24 * np.array([1, 2])), atol=1e-15)
    np.testing.assert_allclose(e[0, 4:6], np.sin(2 * np.pi * 0.25 / 365.25 * np.array([1, 2])), atol=1e-15)
    # timezone-aware input is converted to UTC
    import pandas as pd
    e2 = time_encoding(pd.DatetimeIndex(["2023-01-01 14:00"]).tz_localize("Asia/Shanghai"), 8)
    np.testing.assert_allclose(e2, e, atol=1e-15)


def test_full_scale_shapes():
    hp = HyperParams(N=75, D=6, C=19, H=16, W=16, L=3, d_in=112, d_pa=16, d_pm=16, use_meteo=True)
    assert hp.d_e == 128
    shapes = param_shapes(hp)
    assert shapes["embed.weight"] == (12, 112)
    assert shapes["pos.weight"] == (2, 16)
    assert shapes["ds0.conv1"][1] == 2 * 19 + 16
    assert shapes["head.w1"][0] == 3 * 128
    assert shapes["head.w2"][1] == 6
    rng = np.random.default_rng(0)
    p = init_params(hp, 0)
    m = (nx.Tensor(rng.normal(size=(1, 19, 16, 16))), nx.Tensor(rng.normal(size=(1, 19, 16, 16))))
    kv = encode_meteo(*m, np.array(["2023-01-01"], dtype="datetime64[s]"), p, hp)
    assert kv.shape == (1, 16, 128)  # N^m = (16/4)^2
    assert grid_coords(hp).shape == (256, 2)


def test_hyperparams_validation():
    with pytest.raises(ValueError):
        HyperParams(d_in=110, d_pa=16, heads=4).validate()  # d_e=126 not divisible by 4
    with pytest.raises(ValueError):
        HyperParams(H=10, W=10, use_meteo=True).validate()
    with pytest.raises((KeyError, ValueError)):
        HyperParams.from_dict({"N": 3, "bogus": 1})
    hp = tiny_hp()
    assert HyperParams.from_dict(hp.to_dict()) == hp


def test_init_is_seeded():
    hp = tiny_hp()
    a, b, c = init_params(hp, 1), init_params(hp, 1), init_params(hp, 2)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["embed.weight"], c["embed.weight"])
    assert set(a) == set(param_shapes(hp))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10))
def test_identity_holds_for_any_input(seed, scale):
    t = Tiny(use_meteo=False, seed=seed % 7)
    t.params = identity_params(t.params)
    rng = np.random.default_rng(seed)
    x0, x1 = rng.normal(scale=scale, size=(2, t.hp.N, t.hp.D))
    assert np.array_equal(_run(t, x0, x1), x1)
