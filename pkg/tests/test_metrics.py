import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from captime import metrics as mt

finite = st.floats(-1e3, 1e3, allow_nan=False)


def loop_smape(y, p):
    total = 0.0
    for a, b in zip(y, p):
        d = abs(a) + abs(b)
        total += 0.0 if d == 0 else abs(a - b) / d
    return 200.0 * total / len(y)


def test_smape_examples():
    assert mt.smape([100.0], [110.0]) == pytest.approx(200 * 10 / 210, abs=1e-12)
    assert round(mt.smape([100.0], [110.0]), 4) == 9.5238
    y = np.array([1.0, -2.0, 3.0])
    assert mt.smape(y, y) == 0.0
    assert mt.smape([0.0], [0.0]) == 0.0
    assert mt.smape([0.0, 1.0], [0.0, 3.0]) == pytest.approx(100 * 2 / 4)
    with pytest.raises(mt.MetricError):
        mt.smape([1.0, 2.0], [1.0])
    with pytest.raises(mt.MetricError):
        mt.mse([], [])


def test_mase_seasonal_naive_example():
    m = 4
    x = np.tile([1.0, 3.0, 2.0, 5.0], 6) + 0.1 * np.arange(24)
    y = np.tile([1.0, 3.0, 2.0, 5.0], 2) + 0.1 * np.arange(24, 32)
    naive = np.r_[x[-m:], x[-m:]]
    scale = mt.seasonal_scale(x, m)
    assert scale == pytest.approx(0.4)
    assert mt.mase(y, naive, x, m) == pytest.approx(np.mean(np.abs(y - naive)) / 0.4)
    assert mt.mase(y, y, x, m) == 0.0


@given(st.floats(0.01, 1e3))
def test_mase_scale_invariant(c):
    rng = np.random.default_rng(0)
    x, y, p = rng.normal(size=30), rng.normal(size=6), rng.normal(size=6)
    assert mt.mase(c * y, c * p, c * x, 3) == pytest.approx(mt.mase(y, p, x, 3), rel=1e-12)


def test_mase_errors():
    with pytest.raises(mt.MetricError):
        mt.mase([1.0], [2.0], np.tile([1.0, 2.0], 5), 2)
    with pytest.raises(mt.MetricError):
        mt.mase([1.0], [2.0], [1.0, 2.0], 2)
    assert np.isnan(mt.mase_batch(np.ones((2, 3)), np.zeros((2, 3)), np.ones((2, 5)), 1))


def test_owa():
    assert mt.owa(12.0, 1.5, 12.0, 1.5) == 1.0
    assert mt.owa(6.0, 0.75, 12.0, 1.5) == 0.5
    with pytest.raises(mt.MetricError):
        mt.owa(1.0, 1.0, 0.0, 1.0)
    with pytest.raises(mt.MetricError):
        mt.owa(1.0, 1.0, 1.0, -1.0)


@given(arrays(np.float64, st.integers(1, 40), elements=finite), st.integers(0, 2**31))
def test_point_metrics_match_loops(y, seed):
    p = y + np.random.default_rng(seed).normal(size=y.shape) * 10
    assert mt.mse(y, p) == pytest.approx(sum((a - b) ** 2 for a, b in zip(y, p)) / len(y), rel=1e-10, abs=1e-12)
    assert mt.mae(y, p) == pytest.approx(sum(abs(a - b) for a, b in zip(y, p)) / len(y), rel=1e-10, abs=1e-12)
    assert mt.smape(y, p) == pytest.approx(loop_smape(y, p), rel=1e-10, abs=1e-12)


def test_acf_matches_statsmodels(rng):
    from statsmodels.tsa.stattools import acf

    x = np.sin(np.arange(80) * 2 * np.pi / 12) + rng.normal(size=80) * 0.3
    np.testing.assert_allclose(mt.acf(x, 20), acf(x, nlags=20, fft=False)[1:], atol=1e-12)


@pytest.mark.parametrize("m", [4, 7, 12])
def test_seasonal_indices_match_statsmodels(rng, m):
    from statsmodels.tsa.seasonal import seasonal_decompose

    n = 6 * m + 3
    t = np.arange(n)
    x = (10 + 0.05 * t) * (1 + 0.3 * np.sin(2 * np.pi * t / m)) + rng.normal(size=n) * 0.05
    ref = seasonal_decompose(x, model="multiplicative", period=m).seasonal[:m]
    np.testing.assert_allclose(mt.seasonal_indices(x, m), ref, rtol=1e-10)


def test_seasonality_test_and_naive2(rng):
    t = np.arange(48)
    seasonal = 10 + 3 * np.sin(2 * np.pi * t / 12) + rng.normal(size=48) * 0.1
    assert mt.seasonality_test(seasonal, 12)
    assert not mt.seasonality_test(rng.normal(size=48) + 10, 12)
    flat = np.array([1.0, 4.0, 2.0, 7.0])
    np.testing.assert_array_equal(mt.naive2(flat, 3, 1), [7.0, 7.0, 7.0])
    idx = mt.seasonal_indices(seasonal, 12)
    fc = mt.naive2(seasonal, 12, 12)
    adjusted_last = seasonal[-1] / idx[47 % 12]
    np.testing.assert_allclose(fc, adjusted_last * idx[np.arange(48, 60) % 12], rtol=1e-12)
    # seasonal naive2 tracks the pattern far better than a flat line
    truth = 10 + 3 * np.sin(2 * np.pi * np.arange(48, 60) / 12)
    assert mt.mae(truth, fc) < 0.5 * mt.mae(truth, np.full(12, seasonal[-1]))
    with pytest.raises(mt.MetricError):
        mt.naive2(seasonal, 0, 12)


def test_owa_of_naive2_is_one(rng):
    x = 10 + np.sin(np.arange(40) * 2 * np.pi / 4) + rng.normal(size=40) * 0.2
    y = 10 + np.sin(np.arange(40, 48) * 2 * np.pi / 4)
    base = mt.naive2(x, 8, 4)
    s, m_ = mt.smape(y, base), mt.mase(y, base, x, 4)
    assert mt.owa(s, m_, s, m_) == 1.0


def test_nll_and_coverage(rng):
    mu, sigma, nu = rng.normal(size=500), rng.uniform(0.5, 2, 500), rng.uniform(2, 20, 500)
    y = rng.normal(size=500)
    assert mt.student_t_nll(y, mu, sigma, nu) == pytest.approx(
        -np.mean(stats.t.logpdf(y, nu, loc=mu, scale=sigma)), rel=1e-12)
    half = sigma * stats.t.ppf(0.9, nu)
    expected = np.mean(np.abs(y - mu) <= half)
    assert mt.coverage(y, mu, sigma, nu, 0.8) == expected
    with pytest.raises(mt.MetricError):
        mt.coverage(y, mu, sigma, nu, 1.0)


def test_report_validation_and_json(tmp_path):
    rep = mt.MetricReport({"8": {"mse": 0.5, "n_windows": 3}}, {"seed": 0, "config": {"a": (1, 2)}})
    rep.validate().write(tmp_path / "r.json")
    back = mt.MetricReport.read(tmp_path / "r.json")
    assert back.horizons == rep.horizons and back.metadata["config"]["a"] == [1, 2]
    assert rep.dumps() == back.dumps()
    with pytest.raises(mt.MetricError):
        mt.MetricReport({"8": {"mse": math.inf}}).validate()


def test_config_hash():
    a = mt.config_hash({"x": 1, "y": [1.0, 2.0]})
    assert a == mt.config_hash({"y": (1.0, 2.0), "x": 1})
    assert a != mt.config_hash({"x": 2, "y": [1.0, 2.0]})
    assert len(a) == 64


def test_file_hash(tmp_path):
    (tmp_path / "a").write_bytes(b"abc")
    assert mt.file_hash(tmp_path / "a") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
