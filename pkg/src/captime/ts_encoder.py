"""Patch-mixer temporal encoder, modality connector and masked-patch pretraining.

Token mixing runs along the patch axis with lower-triangular weights, so
token ``i`` only sees patches ``0..i``. That keeps next-patch targets out of
the inputs during training and lets the same weights serve any sequence
length up to ``max_positions`` during autoregressive generation.
"""
import logging
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import diffnum as dn

log = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    patch_len: int = 4
    width: int = 64
    n_blocks: int = 2
    max_positions: int = 64
    d_model: int = 64


@dataclass
class PretrainConfig:
    steps: int = 200
    lr: float = 1e-3
    mask_ratio: float = 0.4
    max_windows: int = 256
    seed: int = 0


def _linear(rng, fan_in, fan_out):
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)), np.zeros(fan_out)


def init_mixer(cfg, seed):
    rng = np.random.default_rng(seed)
    c, n = cfg.width, cfg.max_positions
    p = OrderedDict()
    p["encoder.patch.w"], p["encoder.patch.b"] = _linear(rng, cfg.patch_len, c)
    for k in range(cfg.n_blocks):
        pre = f"encoder.block.{k}."
        p[pre + "ln_t.g"], p[pre + "ln_t.b"] = np.ones(c), np.zeros(c)
        p[pre + "tok1.w"], p[pre + "tok1.b"] = _linear(rng, n, n)
        p[pre + "tok2.w"], p[pre + "tok2.b"] = _linear(rng, n, n)
        p[pre + "ln_c.g"], p[pre + "ln_c.b"] = np.ones(c), np.zeros(c)
        p[pre + "ch1.w"], p[pre + "ch1.b"] = _linear(rng, c, 2 * c)
        p[pre + "ch2.w"], p[pre + "ch2.b"] = _linear(rng, 2 * c, c)
    p["encoder.ln_f.g"], p["encoder.ln_f.b"] = np.ones(c), np.zeros(c)
    return OrderedDict((k, dn.Tensor(v, requires_grad=True, name=k)) for k, v in p.items())


def init_connector(cfg, seed):
    rng = np.random.default_rng(seed)
    w, b = _linear(rng, cfg.width, cfg.d_model)
    return OrderedDict([("mc.w", dn.Tensor(w, True, "mc.w")), ("mc.b", dn.Tensor(b, True, "mc.b"))])


def init_mlp(cfg, seed):
    """Trainable two-layer MLP L_p -> D used when the pretrained mixer is ablated."""
    rng = np.random.default_rng(seed)
    w1, b1 = _linear(rng, cfg.patch_len, cfg.d_model)
    w2, b2 = _linear(rng, cfg.d_model, cfg.d_model)
    raw = OrderedDict([("encoder_mlp.fc1.w", w1), ("encoder_mlp.fc1.b", b1),
                       ("encoder_mlp.fc2.w", w2), ("encoder_mlp.fc2.b", b2)])
    return OrderedDict((k, dn.Tensor(v, True, k)) for k, v in raw.items())


def _causal_upper(n):
    return np.triu(np.ones((n, n)))


def embed_patches(params, patches):
    return dn.as_tensor(patches) @ params["encoder.patch.w"] + params["encoder.patch.b"]


def mixer_body(params, x, cfg):
    """Mixer blocks over embedded patches ``x`` (B x N x C)."""
    n = x.shape[1]
    if n > cfg.max_positions:
        raise ValueError(f"{n} patches exceed max_positions={cfg.max_positions}")
    keep = _causal_upper(n)
    for k in range(cfg.n_blocks):
        pre = f"encoder.block.{k}."
        y = dn.layer_norm(x, params[pre + "ln_t.g"], params[pre + "ln_t.b"])
        y = dn.transpose(y, (0, 2, 1))  # B x C x N
        w1 = params[pre + "tok1.w"][:n, :n] * keep
        w2 = params[pre + "tok2.w"][:n, :n] * keep
        y = dn.gelu(y @ w1 + params[pre + "tok1.b"][:n])
        y = y @ w2 + params[pre + "tok2.b"][:n]
        x = x + dn.transpose(y, (0, 2, 1))
        y = dn.layer_norm(x, params[pre + "ln_c.g"], params[pre + "ln_c.b"])
        y = dn.gelu(y @ params[pre + "ch1.w"] + params[pre + "ch1.b"])
        x = x + (y @ params[pre + "ch2.w"] + params[pre + "ch2.b"])
    return dn.layer_norm(x, params["encoder.ln_f.g"], params["encoder.ln_f.b"])


def encode(params, patches, cfg, variant="mixer"):
    """Patches (B x N x L_p) -> pre-aligned tokens T (B x N x D)."""
    patches = dn.as_tensor(patches)
    if patches.shape[-1] != cfg.patch_len:
        raise ValueError(f"patch length {patches.shape[-1]} != configured {cfg.patch_len}")
    if variant == "mlp":
        h = dn.gelu(patches @ params["encoder_mlp.fc1.w"] + params["encoder_mlp.fc1.b"])
        return h @ params["encoder_mlp.fc2.w"] + params["encoder_mlp.fc2.b"]
    if params["mc.w"].shape[1] != cfg.d_model:
        raise ValueError("modality connector output does not match the backbone width")
    hidden = mixer_body(params, embed_patches(params, patches), cfg)
    return hidden @ params["mc.w"] + params["mc.b"]


def _pretrain_masks(n_windows, n_patches, ratio, rng):
    n_masked = int(round(ratio * n_patches))
    if n_masked < 1:
        raise ValueError("mask ratio masks no patches; the reconstruction loss would be empty")
    masks = np.zeros((n_windows, n_patches))
    for i in range(n_windows):
        masks[i, rng.choice(n_patches, size=n_masked, replace=False)] = 1.0
    return masks


def pretrain(patch_windows, cfg, pcfg, params=None, seed=0):
    """Masked patch reconstruction on windows of normalized patches (W x N x L_p).

    A fixed random subset of each window's patches (``mask_ratio``) is
    replaced by a learned mask embedding; a linear head reconstructs the raw
    patches and the loss is the MSE over masked patches only. Runs
    full-batch Adam with one fixed mask per window.

    Returns ``(encoder_params, loss_curve)``.
    """
    patch_windows = np.asarray(patch_windows, dtype=np.float64)
    if patch_windows.ndim != 3 or patch_windows.shape[0] == 0:
        raise ValueError("pretraining corpus holds no complete window")
    if not 0.0 < pcfg.mask_ratio < 1.0:
        raise ValueError("mask ratio must lie in (0, 1)")
    rng = np.random.default_rng(pcfg.seed)
    if patch_windows.shape[0] > pcfg.max_windows:
        pick = np.linspace(0, patch_windows.shape[0] - 1, pcfg.max_windows).round().astype(int)
        patch_windows = patch_windows[pick]
    w, n, lp = patch_windows.shape
    masks = _pretrain_masks(w, n, pcfg.mask_ratio, rng)
    m3 = masks[:, :, None]
    if params is None:
        params = init_mixer(cfg, seed)
    for p in params.values():
        p.requires_grad = True
    head_rng = np.random.default_rng(pcfg.seed + 1)
    mask_vec = dn.Tensor(head_rng.normal(0.0, 0.02, size=cfg.width), True, "pretrain.mask")
    rw, rb = _linear(head_rng, cfg.width, lp)
    recon_w = dn.Tensor(rw, True, "pretrain.recon.w")
    recon_b = dn.Tensor(rb, True, "pretrain.recon.b")
    trainable = list(params.values()) + [mask_vec, recon_w, recon_b]
    opt = dn.Adam(trainable, lr=pcfg.lr)
    denom = float(masks.sum() * lp)
    curve = []
    for step in range(pcfg.steps):
        x = embed_patches(params, patch_windows)
        x = x * (1.0 - m3) + m3 * mask_vec
        recon = mixer_body(params, x, cfg) @ recon_w + recon_b
        err = recon - patch_windows
        loss = dn.reduce_sum(err * err * m3) * (1.0 / denom)
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append(float(loss.data))
        if step % 50 == 0:
            log.debug("pretrain step %d mse %.5f", step, curve[-1])
    return params, curve
