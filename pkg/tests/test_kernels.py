import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import special, stats

from captime import kernels
from captime._jit import HAVE_NUMBA

BOTH = [False, True] if HAVE_NUMBA else [False]

positive = arrays(np.float64, st.integers(1, 30), elements=st.floats(1e-3, 1e3))
reals = arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e3, 1e3))


@pytest.mark.parametrize("nb", BOTH)
def test_lgamma_and_digamma_against_scipy(nb):
    x = np.concatenate([np.linspace(1e-3, 1.0, 200), np.linspace(1.0, 500.0, 300)])
    np.testing.assert_allclose(kernels.lgamma(x, use_numba=nb), special.gammaln(x), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(kernels.digamma(x, use_numba=nb), special.digamma(x), rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("nb", BOTH)
def test_t_distribution_against_scipy(nb):
    rng = np.random.default_rng(0)
    y, mu = rng.normal(scale=4, size=500), rng.normal(size=500)
    sigma, nu = rng.uniform(0.05, 5.0, 500), rng.uniform(1.01, 200.0, 500)
    np.testing.assert_allclose(kernels.t_logpdf(y, mu, sigma, nu, use_numba=nb),
                               stats.t.logpdf(y, nu, loc=mu, scale=sigma), rtol=1e-10, atol=1e-10)
    z = (y - mu) / sigma
    np.testing.assert_allclose(kernels.t_cdf(z, nu, use_numba=nb), stats.t.cdf(z, nu), atol=1e-12)
    q = rng.uniform(0.001, 0.999, 500)
    np.testing.assert_allclose(kernels.t_ppf(q, nu, use_numba=nb), stats.t.ppf(q, nu), rtol=1e-7, atol=1e-7)


def test_t_ppf_median_is_exact():
    assert np.all(kernels.t_ppf(np.full(5, 0.5), np.array([1.0, 1.5, 3.0, 30.0, 1e6])) == 0.0)


def test_t_ppf_rejects_out_of_range():
    for q in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            kernels.t_ppf(np.array([q]), np.array([3.0]))


def test_cauchy_quantile_closed_form():
    assert kernels.t_ppf(np.array([0.75]), np.array([1.0]))[0] == pytest.approx(math.tan(math.pi * 0.25), abs=1e-7)


@pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")
@given(positive)
def test_lgamma_paths_agree(x):
    np.testing.assert_allclose(kernels.lgamma(x, use_numba=True), kernels.lgamma(x, use_numba=False),
                               rtol=1e-13, atol=1e-13)


@pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")
@given(reals, st.floats(1.01, 100.0))
def test_t_cdf_paths_agree(z, nu):
    nus = np.full_like(z, nu)
    np.testing.assert_allclose(kernels.t_cdf(z, nus, use_numba=True), kernels.t_cdf(z, nus, use_numba=False),
                               atol=1e-13)


@pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-5, 5)),
       st.integers(1, 6))
def test_topk_paths_agree(s, k):
    k = min(k, s.shape[1])
    np.testing.assert_array_equal(kernels.topk_mask(s, k, use_numba=True), kernels.topk_mask(s, k, use_numba=False))


@pytest.mark.parametrize("nb", BOTH)
def test_topk_tie_goes_to_lower_index(nb):
    mask = kernels.topk_mask(np.array([[0.5, 0.5], [0.25, 0.25]]), 1, use_numba=nb)
    np.testing.assert_array_equal(mask, [[1.0, 0.0], [1.0, 0.0]])


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 7)), elements=st.floats(-3, 3)),
       st.integers(1, 7))
def test_topk_keeps_exactly_k(s, k):
    k = min(k, s.shape[1])
    mask = kernels.topk_mask(s, k)
    assert np.all(mask.sum(axis=-1) == k)
    kept_min = np.where(mask > 0, s, np.inf).min(axis=-1)
    dropped_max = np.where(mask > 0, -np.inf, s).max(axis=-1)
    assert np.all(kept_min >= dropped_max)


def test_env_flag_selects_numpy_path():
    code = "from captime import kernels; print(kernels.backend())"
    env = dict(os.environ, CAPTIME_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
    if HAVE_NUMBA:
        env["CAPTIME_DISABLE_NUMBA"] = "0"
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "numba"
