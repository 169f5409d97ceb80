"""Autoregressive multi-horizon forecasting and held-out evaluation."""
import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import kernels
from . import metrics as mx
from .data_io import windows
from .mixture_decoder import PatchDistParams
from .series_prep import SeriesWindow, instance_normalize, n_patches, patchify_batch
from .text_embed import build_prompt

DEFAULT_QUANTILES = (0.1, 0.5, 0.9)


@dataclass
class ForecastRequest:
    window: object  # SeriesWindow or H x C array
    texts: list = field(default_factory=list)
    horizon: int = 1
    quantiles: tuple = DEFAULT_QUANTILES
    explain: bool = False

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not isinstance(self.window, SeriesWindow):
            self.window = SeriesWindow(np.asarray(self.window, dtype=np.float64))
        for q in self.quantiles:
            if not 0.0 < q < 1.0:
                raise ValueError(f"quantile level {q} outside (0, 1)")


@dataclass
class ForecastResult:
    point: np.ndarray  # F x C
    mu: np.ndarray
    sigma: Optional[np.ndarray]
    nu: Optional[np.ndarray]
    quantiles: dict  # q -> F x C
    attention: list  # per generation step: C x N x N_s, or empty
    channel_names: list
    prompt: object = None
    steps: int = 0

    @property
    def horizon(self):
        return self.point.shape[0]

    def to_json(self):
        out = {"horizon": self.horizon, "steps": self.steps, "channels": {}}
        for c, name in enumerate(self.channel_names):
            ch = {"point": self.point[:, c].tolist(), "mu": self.mu[:, c].tolist()}
            if self.sigma is not None:
                ch["sigma"] = self.sigma[:, c].tolist()
                ch["nu"] = self.nu[:, c].tolist()
                ch["quantiles"] = {repr(q): v[:, c].tolist() for q, v in self.quantiles.items()}
            out["channels"][name] = ch
        return out


def generation_steps(horizon, patch_len):
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    return math.ceil(horizon / patch_len)


def generate(model, z, prompts, horizon, explain=False):
    """Roll the model forward from normalized lookbacks ``z`` (B x H).

    Each step patchifies the current sequence (rebuilding the replication
    patch), reads the last token's distribution and appends its location
    as the next input patch. Returns normalized ``(mu, sigma, nu)`` arrays of
    shape B x F (sigma/nu None for point models) and the per-step attention.
    """
    lp = model.cfg.patch_len
    steps = generation_steps(horizon, lp)
    seq = np.asarray(z, dtype=np.float64)
    longest = n_patches(seq.shape[1] + (steps - 1) * lp, lp)
    if longest > model.cfg.max_positions:
        raise ValueError(f"horizon {horizon} needs {longest} positions; the model holds {model.cfg.max_positions}")
    mus, sigmas, nus, attn = [], [], [], []
    for _ in range(steps):
        out = model.forward(patchify_batch(seq, lp), prompts)
        mu = out.mu.data[:, -1, :]
        mus.append(mu)
        if out.sigma is not None:
            sigmas.append(out.sigma.data[:, -1, :])
            nus.append(out.nu.data[:, -1, :])
        if explain and out.attention is not None:
            attn.append(out.attention.copy())
        seq = np.concatenate([seq, mu], axis=1)
    cut = lambda parts: np.concatenate(parts, axis=1)[:, :horizon] if parts else None
    return cut(mus), cut(sigmas), cut(nus), attn


def _quantile_paths(mu, sigma, nu, levels):
    return {q: mu + sigma * kernels.t_ppf(np.full(mu.shape, q), nu) for q in sorted(levels)}


def forecast(model, req):
    """Forecast every channel of ``req.window`` ``req.horizon`` steps ahead."""
    w = req.window
    z, stats = instance_normalize(w)
    t0, t1 = w.timestamps[0], w.timestamps[-1]
    prompt = build_prompt(req.texts, (t0, t1), model.vocab, model.cfg.max_text_len)
    c = w.n_channels
    mu, sigma, nu, attn = generate(model, z.T, [prompt] * c, req.horizon, req.explain)
    mu = mu.T * stats.std + stats.mean
    if sigma is not None:
        sigma = sigma.T * stats.std
        nu = nu.T
        quants = _quantile_paths(mu, sigma, nu, req.quantiles)
    else:
        quants = {}
    return ForecastResult(point=mu.copy(), mu=mu, sigma=sigma, nu=nu, quantiles=quants,
                          attention=attn, channel_names=list(w.channel_names), prompt=prompt,
                          steps=generation_steps(req.horizon, model.cfg.patch_len))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalBatch:
    inputs: np.ndarray  # B x H raw
    targets: np.ndarray  # B x F_max raw
    prompts: list
    starts: np.ndarray
    channels: np.ndarray


def eval_windows(corpus, model, split, max_horizon, stride=None):
    """One window set valid for the longest horizon, so every horizon scores the same windows."""
    cfg = model.cfg
    samples = list(windows(corpus, cfg.lookback, cfg.patch_len, stride=stride, split=split,
                           vocab=model.vocab, max_len=cfg.max_text_len, horizon=max_horizon))
    if not samples:
        raise ValueError(f"split {split!r} has no window of {cfg.lookback}+{max_horizon} steps")
    return EvalBatch(
        inputs=np.stack([s.inputs for s in samples]),
        targets=np.stack([s.target for s in samples]),
        prompts=[s.prompt for s in samples],
        starts=np.array([s.start for s in samples]),
        channels=np.array([s.channel for s in samples]),
    )


def predict_batch(model, inputs, prompts, horizon, chunk=512):
    """Denormalized ``PatchDistParams`` (B x F) for raw lookbacks ``inputs`` (B x H)."""
    mus, sigmas, nus = [], [], []
    for a in range(0, inputs.shape[0], chunk):
        x = inputs[a:a + chunk]
        z, stats = instance_normalize(x.T)
        mu, sigma, nu, _ = generate(model, z.T, prompts[a:a + chunk], horizon)
        mean, std = stats.mean[:, None], stats.std[:, None]
        mus.append(mu * std + mean)
        if sigma is not None:
            sigmas.append(sigma * std)
            nus.append(nu)
    return PatchDistParams(np.concatenate(mus),
                           np.concatenate(sigmas) if sigmas else None,
                           np.concatenate(nus) if nus else None)


def score(y, pred, insample=None, season=1):
    """Metric row for targets ``y`` (B x F) and predictions ``pred``."""
    row = {"mse": mx.mse(y, pred.mu), "mae": mx.mae(y, pred.mu), "smape": mx.smape(y, pred.mu)}
    if insample is not None:
        row["mase"] = mx.mase_batch(y, pred.mu, insample, season)
    if pred.is_probabilistic:
        row["nll"] = mx.student_t_nll(y, pred.mu, pred.sigma, pred.nu)
        row["coverage80"] = mx.coverage(y, pred.mu, pred.sigma, pred.nu, 0.8)
        row["coverage95"] = mx.coverage(y, pred.mu, pred.sigma, pred.nu, 0.95)
    row["n_windows"] = int(y.shape[0])
    return row


def evaluate(model, corpus, horizons, split="test", stride=None, season=1, batch=None):
    """Per-horizon metrics from one checkpoint over a shared window set.

    Generation runs once to the longest horizon; shorter horizons use the
    prefix, which is identical to a separate shorter run because each step
    depends only on earlier steps.
    """
    horizons = sorted({int(h) for h in horizons})
    if not horizons or horizons[0] < 1:
        raise ValueError("need at least one horizon >= 1")
    batch = batch or eval_windows(corpus, model, split, horizons[-1], stride)
    pred = predict_batch(model, batch.inputs, batch.prompts, horizons[-1])
    table = {}
    for h in horizons:
        part = PatchDistParams(pred.mu[:, :h],
                               None if pred.sigma is None else pred.sigma[:, :h],
                               None if pred.nu is None else pred.nu[:, :h])
        insample = batch.inputs if batch.inputs.shape[1] > season else None
        table[str(h)] = score(batch.targets[:, :h], part, insample, season)
    return table


# ---------------------------------------------------------------------------
# output files
# ---------------------------------------------------------------------------

def write_forecast_json(path, result):
    Path(path).write_text(json.dumps(result.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_forecast_csv(path, result):
    qs = sorted(result.quantiles)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["channel", "step", "point", "mu", "sigma", "nu"] + [f"q{q!r}" for q in qs])
        for c, name in enumerate(result.channel_names):
            for t in range(result.horizon):
                sig = "" if result.sigma is None else repr(float(result.sigma[t, c]))
                nu = "" if result.nu is None else repr(float(result.nu[t, c]))
                w.writerow([name, t + 1, repr(float(result.point[t, c])), repr(float(result.mu[t, c])), sig, nu]
                           + [repr(float(result.quantiles[q][t, c])) for q in qs])


def write_attention_csv(path, attention, prompt, vocab, channel_names):
    """Rows ``step,channel,position,token_index,token,weight`` for every attention weight."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "channel", "position", "token_index", "token", "weight"])
        for step, att in enumerate(attention, start=1):
            for c in range(att.shape[0]):
                for i in range(att.shape[1]):
                    for j in range(len(prompt.token_ids)):
                        w.writerow([step, channel_names[c], i, j, vocab.token(prompt.token_ids[j]),
                                    repr(float(att[c, i, j]))])
