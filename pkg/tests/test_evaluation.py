import numpy as np
import pandas as pd
import pytest

from mvar.evaluation import (BUCKETS, gather_truth, persistence_baseline, pooled_rmse, relative_curve,
                             relative_rmse, rmse_buckets, select_init_times, step_buckets)
from mvar.series import CitySeries

LABELS = ["1-24h", "25-48h", "49-72h", "97-120h"]


def check_bucket_mapping():
    m = step_buckets(20, 6)
    return (list(m) == LABELS and m["1-24h"] == [1, 2, 3, 4] and m["25-48h"] == [5, 6, 7, 8]
            and m["49-72h"] == [9, 10, 11, 12] and m["97-120h"] == [17, 18, 19, 20]
            and [b[0] for b in BUCKETS] == LABELS)


def check_excluded_steps():
    """Huge errors in steps 13-16 leave every bucket unchanged but show in the curve."""
    rng = np.random.default_rng(0)
    truth = rng.normal(size=(3, 20, 2, 1))
    preds = truth + rng.normal(size=truth.shape)
    base = rmse_buckets(preds, truth, 6)
    spiked = preds.copy()
    spiked[:, 12:16] += 1e6
    rep = rmse_buckets(spiked, truth, 6)
    used = sorted(s for steps in step_buckets(20, 6).values() for s in steps)
    return (all(rep.bucket_rmse["v0"][b] == base.bucket_rmse["v0"][b] for b in LABELS)
            and not set(range(13, 17)) & set(used)
            and np.all(rep.step_rmse[12:16] > 1e5) and np.all(rep.step_n[12:16] == 6))


def check_hand_fixture():
    # 2 cities, 1 pollutant, errors 1 and 2 in steps 1-4
    truth = np.zeros((1, 4, 2, 1))
    preds = truth.copy()
    preds[:, :, 0] = 1.0
    preds[:, :, 1] = 2.0
    rep = rmse_buckets(preds, truth, 6)
    return (abs(rep.bucket_rmse["v0"]["1-24h"] - np.sqrt(2.5)) <= 1e-12
            and list(rep.bucket_rmse["v0"]) == ["1-24h"] and rep.bucket_n["v0"]["1-24h"] == 8)


def test_bucket_mapping():
    assert check_bucket_mapping()


def test_excluded_steps():
    assert check_excluded_steps()


def test_hand_fixture():
    assert check_hand_fixture()


def test_bucket_mapping_other_resolutions():
    assert step_buckets(24, 1)["1-24h"] == list(range(1, 25))
    assert step_buckets(120, 1)["97-120h"] == list(range(97, 121))
    assert step_buckets(4, 24) == {"1-24h": [1], "25-48h": [2], "49-72h": [3]}
    assert step_buckets(3, 6) == {"1-24h": [1, 2, 3]}


@pytest.mark.parametrize("e", [-3.0, 0.5, 2.0])
def test_constant_error(e):
    truth = np.random.default_rng(1).normal(size=(2, 20, 3, 2))
    rep = rmse_buckets(truth + e, truth, 6, ["a", "b"])
    for p in ("a", "b"):
        for b in LABELS:
            assert rep.bucket_rmse[p][b] == pytest.approx(abs(e), rel=1e-12)


def test_pooling_alternative():
    truth = np.zeros((1, 4, 1, 1))
    preds = np.array([1.0, 1.0, 1.0, 3.0]).reshape(1, 4, 1, 1)
    pooled = rmse_buckets(preds, truth, 6).bucket_rmse["v0"]["1-24h"]
    mean_steps = rmse_buckets(preds, truth, 6, pooling="mean_of_steps").bucket_rmse["v0"]["1-24h"]
    assert pooled == pytest.approx(np.sqrt(12 / 4)) and mean_steps == pytest.approx(1.5)
    with pytest.raises(ValueError):
        rmse_buckets(preds, truth, 6, pooling="median")


def test_nan_truth_is_ignored():
    truth = np.zeros((1, 4, 2, 1))
    truth[0, 0, 1] = np.nan
    preds = np.ones_like(truth)
    rep = rmse_buckets(preds, truth, 6)
    assert rep.bucket_n["v0"]["1-24h"] == 7 and rep.bucket_rmse["v0"]["1-24h"] == 1.0


def test_alignment_mismatch():
    with pytest.raises(ValueError):
        rmse_buckets(np.zeros((1, 4, 2, 1)), np.zeros((1, 3, 2, 1)))


def test_relative_rmse_algebra():
    rng = np.random.default_rng(2)
    truth = rng.normal(size=(2, 20, 3, 1))
    err = rng.normal(size=truth.shape)
    a = rmse_buckets(truth + err, truth, 6)
    b = rmse_buckets(truth + 2 * err, truth, 6)
    rel = relative_rmse(a, b)
    assert all(rel["v0"][x] == pytest.approx(0.5) for x in LABELS)
    assert all(relative_rmse(a, a)["v0"][x] == 1.0 for x in LABELS)
    with pytest.raises(ZeroDivisionError):
        relative_rmse(a, rmse_buckets(truth, truth, 6))
    np.testing.assert_allclose(relative_curve([1.0, 2.0], [2.0, 2.0]), [0.5, 1.0])
    with pytest.raises(ZeroDivisionError):
        relative_curve([1.0], [0.0])


def test_report_csv(tmp_path):
    truth = np.zeros((1, 20, 1, 1))
    rep = rmse_buckets(truth + 1, truth, 6, ["pm25"])
    rep.write_csv(tmp_path / "b.csv", tmp_path / "c.csv")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "pollutant,bucket,rmse,n" and lines[1] == "pm25,1-24h,1.0,4"
    curve = pd.read_csv(tmp_path / "c.csv")
    assert list(curve.columns) == ["step", "lead_hours", "pollutant", "rmse", "n"] and len(curve) == 20


def _series(values, start="2023-01-01 00:00"):
    T = values.shape[0]
    times = pd.date_range(start, periods=T, freq="h", tz="UTC")
    return CitySeries(["a"], np.array([36.0]), np.array([113.0]), times, values, ("pm25",))


def test_init_times_local_0800_2000():
    s = _series(np.ones((72, 1, 1)))
    idx = select_init_times(s, 8.0, history_hours=6, horizon_hours=12, resolution_hours=6)
    # UTC 00:00 = local 08:00, UTC 12:00 = local 20:00
    assert idx == [12, 24, 36, 48]
    assert all(s.times[i].hour in (0, 12) for i in idx)


def test_init_times_skip_incomplete():
    v = np.ones((72, 1, 1))
    v[30] = np.nan  # breaks target of init 24 (24+6)
    s = _series(v)
    assert 24 not in select_init_times(s, 8.0, 6, 12, 6)


def test_persistence_and_truth():
    v = np.arange(30, dtype=float).reshape(30, 1, 1)
    p = persistence_baseline(v, [5, 10], 3)
    assert p.shape == (2, 3, 1, 1) and np.all(p[0] == 5) and np.all(p[1] == 10)
    t = gather_truth(v, [5, 25], 3, 2)
    assert t[0, :, 0, 0].tolist() == [7, 9, 11]
    assert t[1, :2, 0, 0].tolist() == [27, 29] and np.isnan(t[1, 2]).all()


def test_persistence_periodic_signal():
    v = np.sin(2 * np.pi * np.arange(200) / 24).reshape(200, 1, 1)
    idx = list(range(10, 100, 12))
    pers = persistence_baseline(v, idx, 4)
    truth = gather_truth(v, idx, 4, 6)
    curve = pooled_rmse(pers, truth, axis=1)
    assert curve[3] == pytest.approx(0.0, abs=1e-12) and curve[0] > 0.1


def test_persistence_random_walk_grows():
    rng = np.random.default_rng(0)
    v = np.cumsum(rng.normal(size=(20000, 1, 1)), axis=0)
    idx = list(range(0, 19900, 50))
    curve = pooled_rmse(persistence_baseline(v, idx, 8), gather_truth(v, idx, 8, 6), axis=1)
    assert np.all(np.diff(curve) > 0)
    # expected RMSE at step g is sqrt(6 g)
    np.testing.assert_allclose(curve, np.sqrt(6 * np.arange(1, 9)), rtol=0.1)


def test_pooled_rmse():
    p = np.array([[1.0, 2.0], [3.0, np.nan]])
    t = np.zeros((2, 2))
    assert pooled_rmse(p, t) == pytest.approx(np.sqrt(14 / 3))
    np.testing.assert_allclose(pooled_rmse(p, t, axis=0), [np.sqrt(2.5), 3.0])
