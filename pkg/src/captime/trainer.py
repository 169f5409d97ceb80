"""Next-patch training: teacher-forced targets, Adam on the trainable partition, checkpoints."""
import csv
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import diffnum as dn
from . import mixture_decoder as moe
from . import ts_encoder
from .container import load_tensors, save_tensors
from .data_io import count_windows
from .series_prep import instance_normalize, n_patches, patchify_batch
from .text_embed import PAD_ID, build_prompt

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Raised when the loss turns non-finite; ``dump_path`` holds the offending batch."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 1
    steps: Optional[int] = None  # overrides epochs when set
    alpha: float = 0.01
    seed: int = 0
    max_grad_norm: float = 1.0
    stride: Optional[int] = None  # defaults to the patch length
    rollout: int = 0  # extra teacher-forced patches beyond the lookback
    eval_every: int = 0  # 0: validate once per epoch

    def validate(self, model_cfg=None):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.steps is not None and self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.alpha < 0 or self.max_grad_norm <= 0:
            raise ValueError("alpha must be >= 0 and max_grad_norm > 0")
        if self.rollout < 0:
            raise ValueError("rollout must be >= 0")
        if model_cfg is not None:
            n = n_patches(model_cfg.lookback + self.rollout * model_cfg.patch_len, model_cfg.patch_len)
            if n > model_cfg.max_positions:
                raise ValueError("lookback plus rollout exceeds max_positions")
        return self

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        out = cls(**{k: v for k, v in d.items() if k in names})
        out.betas = tuple(out.betas)
        return out


@dataclass
class Examples:
    """Stacked training windows, ready for batching."""

    patches: np.ndarray  # W x N x L_p, normalized
    targets: np.ndarray  # W x N x L_p, normalized
    prompts: list
    starts: np.ndarray
    channels: np.ndarray

    def __len__(self):
        return self.patches.shape[0]

    def take(self, idx):
        return Examples(self.patches[idx], self.targets[idx], [self.prompts[i] for i in idx],
                        self.starts[idx], self.channels[idx])


def make_targets(window, lookback, patch_len, rollout=0):
    """Split a raw window into normalized input patches and per-token targets.

    ``window`` holds ``lookback + (rollout + 1) * patch_len`` values. Stats
    come from the first ``lookback`` values only. The inputs are the first
    ``lookback + rollout * patch_len`` values (so rollout patches are teacher
    forced); token ``i`` targets the next verbatim patch when that patch lies
    wholly inside the inputs, and every later token (the last real one and
    the padded ones) targets the ``patch_len`` values right after the inputs.

    Returns ``(patches N_p x L_p, targets N_p x L_p, stats)``.
    """
    window = np.asarray(window, dtype=np.float64).reshape(-1)
    n_in = lookback + rollout * patch_len
    need = n_in + patch_len
    if window.size < need:
        raise ValueError(f"window of {window.size} values is shorter than {need}")
    _, stats = instance_normalize(window[:lookback])
    z = (window[:need] - stats.mean[0]) / stats.std[0]
    patches = patchify_batch(z[None, :n_in], patch_len)[0]
    targets = _shift_targets(z, n_in, patch_len, patches.shape[0])
    return patches, targets, stats


def _shift_targets(z, n_in, patch_len, n_tok):
    future = z[n_in:n_in + patch_len]
    out = np.empty((n_tok, patch_len))
    for i in range(n_tok):
        hi = (i + 2) * patch_len
        out[i] = z[hi - patch_len:hi] if hi <= n_in else future
    return out


def build_examples(corpus, model_cfg, vocab, split="train", stride=None, rollout=0):
    """All (channel, window) pairs of ``split`` with ``rollout`` teacher-forced patches."""
    h, lp = model_cfg.lookback, model_cfg.patch_len
    stride = stride or lp
    span = h + (rollout + 1) * lp
    lo, hi = corpus.split_bounds()[split]
    n_win = count_windows(hi - lo, h, (rollout + 1) * lp, stride)
    if n_win == 0:
        raise ValueError(f"split {split!r} has no complete window of {span} steps")
    starts = lo + stride * np.arange(n_win)
    prompt_cache = {}
    patches, targets, prompts, st, ch = [], [], [], [], []
    for c in range(corpus.n_channels):
        col = corpus.values[:, c]
        for s in starts:
            p, t, _ = make_targets(col[s:s + span], h, lp, rollout)
            if s not in prompt_cache:
                t0, t1 = corpus.timestamps[s], corpus.timestamps[s + h - 1]
                prompt_cache[s] = build_prompt(corpus.texts, (t0, t1), vocab, model_cfg.max_text_len)
            patches.append(p)
            targets.append(t)
            prompts.append(prompt_cache[s])
            st.append(s)
            ch.append(c)
    return Examples(np.stack(patches), np.stack(targets), prompts, np.array(st), np.array(ch))


def build_training_sets(corpus, model_cfg, vocab, split="train", stride=None, rollout=0):
    """One :class:`Examples` group per generation depth ``0..rollout``.

    Depth ``r`` mirrors generation step ``r + 1``: the lookback plus ``r``
    true future patches, then the replication patch. All groups share the
    same window starts, so every depth is trained on the same windows.
    """
    lp = model_cfg.patch_len
    stride = stride or lp
    lo, hi = corpus.split_bounds()[split]
    n_win = count_windows(hi - lo, model_cfg.lookback, (rollout + 1) * lp, stride)
    groups = []
    for r in range(rollout + 1):
        ex = build_examples(corpus, model_cfg, vocab, split, stride, r)
        keep = np.flatnonzero(np.tile(np.arange(len(ex) // corpus.n_channels) < n_win, corpus.n_channels))
        groups.append(ex.take(keep))
    return groups


def _as_groups(data):
    if data is None:
        return []
    return list(data) if isinstance(data, (list, tuple)) else [data]


def _epoch_batches(groups, batch_size, rng):
    """Seeded (group, indices) batches covering every example once."""
    batches = []
    for g, ex in enumerate(groups):
        order = rng.permutation(len(ex))
        batches += [(g, order[a:a + batch_size]) for a in range(0, len(ex), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


@dataclass
class TrainResult:
    model: object
    history: list = field(default_factory=list)
    checkpoint: Optional[Path] = None
    steps: int = 0


def _dump_batch(out_dir, batch, step):
    out_dir = Path(out_dir) if out_dir else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    width = max(len(p) for p in batch.prompts)
    ids = np.full((len(batch), width), PAD_ID, dtype=np.int64)
    for i, p in enumerate(batch.prompts):
        ids[i, :len(p)] = p.token_ids
    path = out_dir / f"nan_batch_step{step}.npz"
    np.savez(path, patches=batch.patches, targets=batch.targets, token_ids=ids,
             starts=batch.starts, channels=batch.channels)
    return path


def evaluate_loss(model, data, batch_size=256):
    """Mean main loss (NLL, or MSE for point models) over every example, no update."""
    total, count = 0.0, 0
    for examples in _as_groups(data):
        for a in range(0, len(examples), batch_size):
            b = examples.take(np.arange(a, min(a + batch_size, len(examples))))
            out = model.forward(b.patches, b.prompts)
            if model.cfg.point:
                loss = moe.mse_loss(out.mu, b.targets)
            else:
                loss = moe.nll_loss(out.mu, out.sigma, out.nu, b.targets)
            total += float(loss.data) * len(b)
            count += len(b)
    return total / count


def train(model, train_set, cfg, val_set=None, out_dir=None, extra_manifest=None):
    """Optimize the model's trainable tensors.

    ``train_set`` is one :class:`Examples` or a list of groups with equal
    sequence length inside each group. Every epoch visits all examples in a
    seeded order of single-group batches; ``cfg.steps`` (when set) fixes the
    total step count, cycling epochs as needed. Writes ``metrics.csv`` and a
    checkpoint to ``out_dir`` when given.
    """
    cfg.validate(model.cfg)
    groups = [g for g in _as_groups(train_set) if len(g)]
    if not groups:
        raise ValueError("training set is empty")
    val_groups = _as_groups(val_set)
    params = model.trainable()
    opt = dn.Adam(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    per_epoch = sum(math.ceil(len(g) / cfg.batch_size) for g in groups)
    total = cfg.steps if cfg.steps is not None else cfg.epochs * per_epoch
    m = model.cfg.n_experts
    history = []
    plan, pos, epoch = [], 0, 0
    for step in range(1, total + 1):
        if pos >= len(plan):
            plan, pos = _epoch_batches(groups, cfg.batch_size, rng), 0
            epoch += 1
        g, idx = plan[pos]
        pos += 1
        batch = groups[g].take(idx)
        try:
            loss, main, lb, out = model.loss(batch.patches, batch.targets, batch.prompts, cfg.alpha)
            if not np.isfinite(loss.data):
                raise dn.NonFiniteError("loss is not finite")
            opt.zero_grad()
            loss.backward()
        except FloatingPointError as exc:
            path = _dump_batch(out_dir, batch, step)
            raise TrainingDiverged(f"non-finite value at step {step} ({exc}); batch dumped to {path}", path) from exc
        dn.clip_grad_norm(params, cfg.max_grad_norm)
        opt.step()
        f, _ = moe.expert_load(out.routing)
        row = OrderedDict(step=step, epoch=epoch, train_nll=float(main.data), val_nll="", L_b=float(lb.data))
        for k in range(m):
            row[f"f_{k}"] = float(f[k])
        epoch_end = pos >= len(plan) or step == total
        due = (step % cfg.eval_every == 0 or step == total) if cfg.eval_every else epoch_end
        if val_groups and due:
            row["val_nll"] = evaluate_loss(model, val_groups)
        history.append(row)
        if step % 50 == 0 or step == total:
            log.info("step %d loss %.5f val %s", step, row["train_nll"], row["val_nll"])
    result = TrainResult(model=model, history=history, steps=total)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_history(out_dir / "metrics.csv", history, m)
        extra = {"train_config": cfg.to_dict(), "step": total}
        if extra_manifest:
            extra.update(extra_manifest)
        result.checkpoint = model.save(out_dir, extra=extra)
    return result


def write_history(path, history, n_experts):
    cols = ["step", "epoch", "train_nll", "val_nll", "L_b"] + [f"f_{k}" for k in range(n_experts)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in history:
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])


# ---------------------------------------------------------------------------
# encoder pretraining on a corpus
# ---------------------------------------------------------------------------

def pretrain_windows(corpus, model_cfg, split="train", stride=None):
    """Normalized lookback patches (W x N_p x L_p) for masked-patch pretraining."""
    h, lp = model_cfg.lookback, model_cfg.patch_len
    stride = stride or lp
    lo, hi = corpus.split_bounds()[split]
    n_win = count_windows(hi - lo, h, 0, stride) if hi - lo >= h else 0
    if n_win == 0:
        raise ValueError("pretraining corpus holds no complete window")
    rows = []
    for c in range(corpus.n_channels):
        for s in lo + stride * np.arange(n_win):
            z, _ = instance_normalize(corpus.values[s:s + h, c])
            rows.append(z[:, 0])
    return patchify_batch(np.stack(rows), lp)


def pretrain_encoder(corpus, model_cfg, pcfg):
    """Pretrain the mixer encoder on the corpus's training split."""
    enc_cfg = model_cfg.encoder_config()
    params, curve = ts_encoder.pretrain(pretrain_windows(corpus, model_cfg), enc_cfg, pcfg, seed=pcfg.seed)
    return params, curve


def save_encoder(path, params, metadata=None):
    save_tensors(path, {k: t.data for k, t in params.items()}, metadata=metadata)


def load_encoder(path):
    tensors, meta = load_tensors(path)
    bad = [k for k in tensors if not k.startswith("encoder.")]
    if bad:
        raise ValueError(f"{path} holds non-encoder tensors: {bad[:3]}")
    return OrderedDict((k, dn.Tensor(v, True, k)) for k, v in sorted(tensors.items())), meta
