"""Scalar-loop numeric kernels with a numba path and a pure-numpy path.

Every kernel exists twice: ``*_nb`` (compiled with ``numba.njit`` when numba
is importable) and ``*_np`` (vectorized numpy). The public names at the
bottom of the module bind to one of the two according to
:data:`captime._jit.NUMBA_ENABLED`. Both paths implement the same algorithm
and agree to within a few ulps; within one path results are bitwise
reproducible.
"""
import math

import numpy as np

from ._jit import JIT_OPTIONS, NUMBA_ENABLED, njit

LANCZOS_G = 7.0
LANCZOS_COEF = np.array([
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
])
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_LOG_PI = math.log(math.pi)

# digamma: shift argument up to this value, then use the asymptotic series
_DIGAMMA_SHIFT = 10.0
_CF_EPS = 1e-15
_CF_TINY = 1e-300
_CF_MAX_ITER = 10000


# ---------------------------------------------------------------------------
# lgamma / digamma
# ---------------------------------------------------------------------------

@njit(**JIT_OPTIONS)
def _lgamma_core_scalar(x):
    x = x - 1.0
    a = LANCZOS_COEF[0]
    t = x + LANCZOS_G + 0.5
    for i in range(1, 9):
        a += LANCZOS_COEF[i] / (x + i)
    return _HALF_LOG_2PI + (x + 0.5) * math.log(t) - t + math.log(a)


@njit(**JIT_OPTIONS)
def _lgamma_scalar(x):
    if x < 0.5:
        # reflection
        return math.log(math.pi / abs(math.sin(math.pi * x))) - _lgamma_core_scalar(1.0 - x)
    return _lgamma_core_scalar(x)


@njit(**JIT_OPTIONS)
def _lgamma_nb(flat):
    out = np.empty_like(flat)
    for i in range(flat.shape[0]):
        out[i] = _lgamma_scalar(flat[i])
    return out


def _lgamma_core_np(x):
    x = x - 1.0
    a = np.full_like(x, LANCZOS_COEF[0])
    t = x + LANCZOS_G + 0.5
    for i in range(1, 9):
        a = a + LANCZOS_COEF[i] / (x + i)
    return _HALF_LOG_2PI + (x + 0.5) * np.log(t) - t + np.log(a)


def _lgamma_np(flat):
    small = flat < 0.5
    if not small.any():
        return _lgamma_core_np(flat)
    out = np.empty_like(flat)
    big = ~small
    out[big] = _lgamma_core_np(flat[big])
    xs = flat[small]
    out[small] = np.log(np.pi / np.abs(np.sin(np.pi * xs))) - _lgamma_core_np(1.0 - xs)
    return out


@njit(**JIT_OPTIONS)
def _digamma_scalar(x):
    acc = 0.0
    while x < _DIGAMMA_SHIFT:
        acc -= 1.0 / x
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (1.0 / 240 - inv2 * (1.0 / 132)))))
    return acc + math.log(x) - 0.5 * inv - series


@njit(**JIT_OPTIONS)
def _digamma_nb(flat):
    out = np.empty_like(flat)
    for i in range(flat.shape[0]):
        out[i] = _digamma_scalar(flat[i])
    return out


def _digamma_np(flat):
    x = flat.copy()
    acc = np.zeros_like(x)
    while True:
        m = x < _DIGAMMA_SHIFT
        if not m.any():
            break
        acc[m] -= 1.0 / x[m]
        x[m] += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (1.0 / 240 - inv2 * (1.0 / 132)))))
    return acc + np.log(x) - 0.5 * inv - series


# ---------------------------------------------------------------------------
# Student's t density, CDF and quantile
# ---------------------------------------------------------------------------

@njit(**JIT_OPTIONS)
def _t_logpdf_nb(y, mu, sigma, nu):
    out = np.empty_like(y)
    for i in range(y.shape[0]):
        z = (y[i] - mu[i]) / sigma[i]
        n = nu[i]
        out[i] = (_lgamma_scalar(0.5 * (n + 1.0)) - _lgamma_scalar(0.5 * n)
                  - 0.5 * math.log(n * math.pi) - math.log(sigma[i])
                  - 0.5 * (n + 1.0) * math.log1p(z * z / n))
    return out


def _t_logpdf_np(y, mu, sigma, nu):
    z = (y - mu) / sigma
    return (_lgamma_np(0.5 * (nu + 1.0)) - _lgamma_np(0.5 * nu)
            - 0.5 * np.log(nu * np.pi) - np.log(sigma)
            - 0.5 * (nu + 1.0) * np.log1p(z * z / nu))


@njit(**JIT_OPTIONS)
def _betacf_scalar(a, b, x):
    # modified Lentz continued fraction for the incomplete beta function
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            break
    return h


@njit(**JIT_OPTIONS)
def _betainc_scalar(a, b, x, xc):
    """Regularized I_x(a, b); ``xc`` is 1 - x computed by the caller."""
    if x <= 0.0:
        return 0.0
    if xc <= 0.0:
        return 1.0
    lbeta = _lgamma_scalar(a + b) - _lgamma_scalar(a) - _lgamma_scalar(b)
    front = math.exp(lbeta + a * math.log(x) + b * math.log(xc))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf_scalar(a, b, x) / a
    return 1.0 - front * _betacf_scalar(b, a, xc) / b


@njit(**JIT_OPTIONS)
def _t_cdf_scalar(z, nu):
    z2 = z * z
    x = nu / (nu + z2)
    xc = z2 / (nu + z2)
    tail = 0.5 * _betainc_scalar(0.5 * nu, 0.5, x, xc)
    if z > 0:
        return 1.0 - tail
    return tail


@njit(**JIT_OPTIONS)
def _t_cdf_nb(z, nu):
    out = np.empty_like(z)
    for i in range(z.shape[0]):
        out[i] = _t_cdf_scalar(z[i], nu[i])
    return out


def _betacf_np(a, b, x):
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = np.ones_like(x)
    d = 1.0 - qab * x / qap
    d = np.where(np.abs(d) < _CF_TINY, _CF_TINY, d)
    d = 1.0 / d
    h = d.copy()
    active = np.ones(x.shape, dtype=bool)
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d_new = 1.0 + aa * d
        d_new = np.where(np.abs(d_new) < _CF_TINY, _CF_TINY, d_new)
        c_new = 1.0 + aa / c
        c_new = np.where(np.abs(c_new) < _CF_TINY, _CF_TINY, c_new)
        d_new = 1.0 / d_new
        h_new = h * d_new * c_new
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d_new = 1.0 + aa * d_new
        d_new = np.where(np.abs(d_new) < _CF_TINY, _CF_TINY, d_new)
        c_new = 1.0 + aa / c_new
        c_new = np.where(np.abs(c_new) < _CF_TINY, _CF_TINY, c_new)
        d_new = 1.0 / d_new
        delta = d_new * c_new
        h_new = h_new * delta
        # freeze converged lanes so each matches the scalar loop exactly
        d = np.where(active, d_new, d)
        c = np.where(active, c_new, c)
        h = np.where(active, h_new, h)
        active = active & ~(np.abs(delta - 1.0) < _CF_EPS)
        if not active.any():
            break
    return h


def _betainc_np(a, b, x, xc):
    a, b, x, xc = np.broadcast_arrays(a, b, x, xc)
    out = np.empty(x.shape)
    lo = x <= 0.0
    hi = (xc <= 0.0) & ~lo
    out[lo] = 0.0
    out[hi] = 1.0
    mid = ~(lo | hi)
    if mid.any():
        am, bm, xm, xcm = a[mid], b[mid], x[mid], xc[mid]
        lbeta = _lgamma_np(am + bm) - _lgamma_np(am) - _lgamma_np(bm)
        front = np.exp(lbeta + am * np.log(xm) + bm * np.log(xcm))
        direct = xm < (am + 1.0) / (am + bm + 2.0)
        res = np.empty(xm.shape)
        if direct.any():
            res[direct] = front[direct] * _betacf_np(am[direct], bm[direct], xm[direct]) / am[direct]
        flip = ~direct
        if flip.any():
            res[flip] = 1.0 - front[flip] * _betacf_np(bm[flip], am[flip], xcm[flip]) / bm[flip]
        out[mid] = res
    return out


def _t_cdf_np(z, nu):
    z2 = z * z
    x = nu / (nu + z2)
    xc = z2 / (nu + z2)
    tail = 0.5 * _betainc_np(0.5 * nu, np.full_like(nu, 0.5), x, xc)
    return np.where(z > 0, 1.0 - tail, tail)


@njit(**JIT_OPTIONS)
def _t_ppf_nb(q, nu, tol):
    out = np.empty_like(q)
    for i in range(q.shape[0]):
        qi = q[i]
        n = nu[i]
        lo = -1.0
        hi = 1.0
        while _t_cdf_scalar(lo, n) > qi:
            lo *= 2.0
        while _t_cdf_scalar(hi, n) < qi:
            hi *= 2.0
        while hi - lo > tol * max(1.0, abs(lo), abs(hi)):
            mid = 0.5 * (lo + hi)
            if _t_cdf_scalar(mid, n) < qi:
                lo = mid
            else:
                hi = mid
        out[i] = 0.5 * (lo + hi)
    return out


def _t_ppf_np(q, nu, tol):
    lo = -np.ones_like(q)
    hi = np.ones_like(q)
    while True:
        m = _t_cdf_np(lo, nu) > q
        if not m.any():
            break
        lo = np.where(m, lo * 2.0, lo)
    while True:
        m = _t_cdf_np(hi, nu) < q
        if not m.any():
            break
        hi = np.where(m, hi * 2.0, hi)
    while True:
        scale = np.maximum(1.0, np.maximum(np.abs(lo), np.abs(hi)))
        active = (hi - lo) > tol * scale
        if not active.any():
            break
        mid = 0.5 * (lo + hi)
        below = _t_cdf_np(mid, nu) < q
        lo = np.where(active & below, mid, lo)
        hi = np.where(active & ~below, mid, hi)
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# top-K routing mask
# ---------------------------------------------------------------------------

@njit(**JIT_OPTIONS)
def _topk_mask_nb(s, k):
    rows, m = s.shape
    out = np.zeros_like(s)
    for r in range(rows):
        for _ in range(k):
            best = -1
            best_val = -np.inf
            for j in range(m):
                # strict > keeps the lowest index on ties
                if out[r, j] == 0.0 and s[r, j] > best_val:
                    best = j
                    best_val = s[r, j]
            out[r, best] = 1.0
    return out


def _topk_mask_np(s, k):
    order = np.argsort(-s, axis=1, kind="stable")[:, :k]
    out = np.zeros_like(s)
    np.put_along_axis(out, order, 1.0, axis=1)
    return out


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------

def _flat(x):
    # owned copy: broadcast views are read-only and numba warns about them
    return np.array(x, dtype=np.float64, order="C").reshape(-1)


def _pick(nb, np_):
    return nb if NUMBA_ENABLED else np_


def backend():
    """Name of the active kernel path."""
    return "numba" if NUMBA_ENABLED else "numpy"


def lgamma(x, use_numba=None):
    """log Gamma(x) for x > 0 via the Lanczos approximation (g=7, 9 terms)."""
    x = np.asarray(x, dtype=np.float64)
    impl = _pick(_lgamma_nb, _lgamma_np) if use_numba is None else (_lgamma_nb if use_numba else _lgamma_np)
    return impl(_flat(x)).reshape(x.shape)


def digamma(x, use_numba=None):
    """d/dx log Gamma(x) for x > 0 (recurrence shift + asymptotic series)."""
    x = np.asarray(x, dtype=np.float64)
    impl = _pick(_digamma_nb, _digamma_np) if use_numba is None else (_digamma_nb if use_numba else _digamma_np)
    return impl(_flat(x)).reshape(x.shape)


def t_logpdf(y, mu, sigma, nu, use_numba=None):
    y, mu, sigma, nu = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (y, mu, sigma, nu)))
    impl = _pick(_t_logpdf_nb, _t_logpdf_np) if use_numba is None else (_t_logpdf_nb if use_numba else _t_logpdf_np)
    return impl(_flat(y), _flat(mu), _flat(sigma), _flat(nu)).reshape(y.shape)


def t_cdf(z, nu, use_numba=None):
    """CDF of the standard Student's t at ``z`` via the regularized incomplete beta."""
    z, nu = np.broadcast_arrays(np.asarray(z, dtype=np.float64), np.asarray(nu, dtype=np.float64))
    impl = _pick(_t_cdf_nb, _t_cdf_np) if use_numba is None else (_t_cdf_nb if use_numba else _t_cdf_np)
    return impl(_flat(z), _flat(nu)).reshape(z.shape)


def t_ppf(q, nu, tol=1e-8, use_numba=None):
    """Standard Student's t quantile by bracketing then bisection on :func:`t_cdf`."""
    q, nu = np.broadcast_arrays(np.asarray(q, dtype=np.float64), np.asarray(nu, dtype=np.float64))
    if not np.all((q > 0.0) & (q < 1.0)):
        raise ValueError("quantile levels must lie strictly inside (0, 1)")
    impl = _pick(_t_ppf_nb, _t_ppf_np) if use_numba is None else (_t_ppf_nb if use_numba else _t_ppf_np)
    out = impl(_flat(q), _flat(nu), float(tol)).reshape(q.shape)
    # bisection stops within tol of the median; pin it to the exact symmetric value
    return np.where(q == 0.5, 0.0, out)


def topk_mask(s, k, use_numba=None):
    """0/1 mask of the ``k`` largest entries along the last axis; ties go to the lower index."""
    s = np.asarray(s, dtype=np.float64)
    shape = s.shape
    s2 = np.ascontiguousarray(s.reshape(-1, shape[-1]))
    impl = _pick(_topk_mask_nb, _topk_mask_np) if use_numba is None else (_topk_mask_nb if use_numba else _topk_mask_np)
    return impl(s2, int(k)).reshape(shape)
