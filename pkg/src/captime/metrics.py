"""Point and probabilistic forecast metrics, the Naive2 baseline and report files.

SMAPE, MASE and OWA follow the M4 competition conventions. Naive2 is the
seasonally adjusted naive forecast: when a 90% autocorrelation test finds
seasonality at period ``m``, the insample is divided by classical
multiplicative seasonal indices, the last adjusted value is repeated, and
the indices are multiplied back in.
"""
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels


class MetricError(ValueError):
    pass


def _pair(y, yhat):
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise MetricError(f"length mismatch: {y.shape} vs {yhat.shape}")
    if y.size == 0:
        raise MetricError("metrics need at least one value")
    return y, yhat


def mse(y, yhat):
    y, yhat = _pair(y, yhat)
    return float(np.mean((y - yhat) ** 2))


def mae(y, yhat):
    y, yhat = _pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def smape(y, yhat):
    """Percent; terms with ``|y| + |yhat| = 0`` contribute 0."""
    y, yhat = _pair(y, yhat)
    denom = np.abs(y) + np.abs(yhat)
    safe = np.where(denom == 0.0, 1.0, denom)
    terms = np.where(denom == 0.0, 0.0, np.abs(y - yhat) / safe)
    return float(200.0 * terms.mean())


def seasonal_scale(insample, m=1):
    insample = np.asarray(insample, dtype=np.float64).reshape(-1)
    if insample.size <= m:
        raise MetricError(f"insample of length {insample.size} is too short for period {m}")
    return float(np.mean(np.abs(insample[m:] - insample[:-m])))


def mase(y, yhat, insample, m=1):
    y, yhat = _pair(y, yhat)
    scale = seasonal_scale(insample, m)
    if scale == 0.0:
        raise MetricError("MASE scale is zero (insample is constant at the seasonal lag)")
    return float(np.mean(np.abs(y - yhat)) / scale)


def mase_batch(y, yhat, insample, m=1):
    """Mean of per-row MASE; rows whose scale is zero are skipped (NaN if all are)."""
    vals = []
    for yr, pr, xr in zip(y, yhat, insample):
        scale = seasonal_scale(xr, m)
        if scale > 0.0:
            vals.append(np.mean(np.abs(yr - pr)) / scale)
    return float(np.mean(vals)) if vals else float("nan")


def owa(smape_model, mase_model, smape_naive2, mase_naive2):
    if smape_naive2 <= 0 or mase_naive2 <= 0:
        raise MetricError("Naive2 baselines must be positive")
    return 0.5 * (smape_model / smape_naive2 + mase_model / mase_naive2)


def acf(x, max_lag):
    """Sample autocorrelations at lags 1..max_lag (biased, statsmodels convention)."""
    x = np.asarray(x, dtype=np.float64)
    d = x - x.mean()
    denom = float(d @ d)
    return np.array([float(d[k:] @ d[:-k]) / denom for k in range(1, max_lag + 1)])


def seasonality_test(insample, m):
    """90% test on the lag-``m`` autocorrelation (M4 benchmark rule)."""
    x = np.asarray(insample, dtype=np.float64)
    if m <= 1 or x.size < 3 * m:
        return False
    r = acf(x, m)
    limit = 1.645 * math.sqrt((1.0 + 2.0 * np.sum(r[:-1] ** 2)) / x.size)
    return bool(abs(r[-1]) > limit)


def seasonal_indices(insample, m):
    """Classical multiplicative decomposition: one index per phase, phase 0 = first insample point."""
    x = np.asarray(insample, dtype=np.float64)
    n = x.size
    if m % 2 == 0:
        w = np.r_[0.5, np.ones(m - 1), 0.5] / m
    else:
        w = np.ones(m) / m
    half = len(w) // 2
    trend = np.full(n, np.nan)
    trend[half:n - half] = np.convolve(x, w, mode="valid")
    ratio = x / trend
    idx = np.array([np.nanmean(ratio[p::m]) for p in range(m)])
    return idx / idx.mean()


def naive2(insample, horizon, m=1):
    """Seasonally adjusted naive forecast of length ``horizon``."""
    x = np.asarray(insample, dtype=np.float64).reshape(-1)
    if x.size == 0 or horizon < 1:
        raise MetricError("naive2 needs data and a positive horizon")
    if not seasonality_test(x, m):
        return np.full(horizon, x[-1])
    idx = seasonal_indices(x, m)
    n = x.size
    adjusted = x / idx[np.arange(n) % m]
    return adjusted[-1] * idx[np.arange(n, n + horizon) % m]


def student_t_nll(y, mu, sigma, nu):
    return float(-np.mean(kernels.t_logpdf(np.asarray(y, dtype=np.float64), mu, sigma, nu)))


def coverage(y, mu, sigma, nu, level):
    """Share of ``y`` inside the central ``level`` interval of each Student's t."""
    if not 0.0 < level < 1.0:
        raise MetricError("coverage level must lie in (0, 1)")
    y = np.asarray(y, dtype=np.float64)
    half = np.asarray(sigma) * kernels.t_ppf(np.full(np.shape(mu), 0.5 + level / 2.0), nu)
    inside = np.abs(y - mu) <= half
    return float(inside.mean())


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, (tuple, set)):
        return list(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


@dataclass
class MetricReport:
    horizons: dict = field(default_factory=dict)  # "F" -> {metric: float}
    metadata: dict = field(default_factory=dict)

    def validate(self):
        for h, row in self.horizons.items():
            for k, v in row.items():
                if isinstance(v, float) and not math.isfinite(v):
                    raise MetricError(f"metric {k} at horizon {h} is not finite")
        return self

    def to_dict(self):
        return {"horizons": self.horizons, "metadata": self.metadata}

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_jsonable) + "\n"

    def write(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def read(cls, path):
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(d.get("horizons", {}), d.get("metadata", {}))
