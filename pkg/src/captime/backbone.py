"""Frozen pre-layer-norm causal transformer (GPT-2 style)."""
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from . import diffnum as dn
from .container import ContainerError, load_tensors, save_tensors

log = logging.getLogger(__name__)

PREFIX = "backbone."
MASK_VALUE = -1e9


class UnsupportedVariant(NotImplementedError):
    pass


@dataclass
class BackboneConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ffn: int = 256
    max_positions: int = 64
    vocab_size: int = 4

    def validate(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if min(self.n_layers, self.n_heads, self.d_model, self.d_ffn, self.max_positions) < 1:
            raise ValueError("backbone dimensions must be positive")
        if self.vocab_size < 4:
            raise ValueError("vocabulary must hold at least the 4 special tokens")
        return self

    def to_dict(self):
        return asdict(self)


def expected_shapes(cfg):
    d, f = cfg.d_model, cfg.d_ffn
    shapes = OrderedDict()
    shapes[PREFIX + "wte"] = (cfg.vocab_size, d)
    shapes[PREFIX + "wpe"] = (cfg.max_positions, d)
    for layer in range(cfg.n_layers):
        p = f"{PREFIX}h.{layer}."
        shapes[p + "ln_1.g"] = (d,)
        shapes[p + "ln_1.b"] = (d,)
        shapes[p + "attn.c_attn.w"] = (d, 3 * d)
        shapes[p + "attn.c_attn.b"] = (3 * d,)
        shapes[p + "attn.c_proj.w"] = (d, d)
        shapes[p + "attn.c_proj.b"] = (d,)
        shapes[p + "ln_2.g"] = (d,)
        shapes[p + "ln_2.b"] = (d,)
        shapes[p + "mlp.c_fc.w"] = (d, f)
        shapes[p + "mlp.c_fc.b"] = (f,)
        shapes[p + "mlp.c_proj.w"] = (f, d)
        shapes[p + "mlp.c_proj.b"] = (d,)
    shapes[PREFIX + "ln_f.g"] = (d,)
    shapes[PREFIX + "ln_f.b"] = (d,)
    return shapes


def seeded_init(cfg, seed):
    """Deterministic weights: N(0, 0.02) for matrices and embeddings, LN gains 1, biases 0.

    Row 0 of the token table (``<pad>``) is zero.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    weights = OrderedDict()
    for name, shape in expected_shapes(cfg).items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith(".b"):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, 0.02, size=shape)
        weights[name] = dn.Tensor(arr, requires_grad=False, name=name)
    weights[PREFIX + "wte"].data[0] = 0.0
    return weights


def save_weights(path, weights, cfg):
    save_tensors(path, {k: v.data for k, v in weights.items()}, metadata={"backbone_config": str(cfg.to_dict())})


def load_weights(path, cfg):
    """Load and validate every expected backbone tensor from a container file.

    Names may be stored with or without the ``backbone.`` prefix. Missing
    tensors and shape mismatches raise :class:`ContainerError` listing every
    offender; unknown names only log a warning.
    """
    cfg.validate()
    raw, _ = load_tensors(path)
    found = {(k if k.startswith(PREFIX) else PREFIX + k): v for k, v in raw.items()}
    expected = expected_shapes(cfg)
    missing = [k for k in expected if k not in found]
    bad = [f"{k}: expected {expected[k]}, got {tuple(found[k].shape)}"
           for k in expected if k in found and tuple(found[k].shape) != expected[k]]
    if missing or bad:
        parts = []
        if missing:
            parts.append("missing: " + ", ".join(missing))
        if bad:
            parts.append("shape mismatch: " + "; ".join(bad))
        raise ContainerError(f"{path}: " + " | ".join(parts))
    unknown = sorted(set(found) - set(expected))
    if unknown:
        log.warning("ignoring unknown tensors in %s: %s", path, ", ".join(unknown))
    return OrderedDict((k, dn.Tensor(found[k], requires_grad=False, name=k)) for k in expected)


def causal_mask(n):
    """n x n additive mask: 0 on and below the diagonal, a large negative above."""
    return np.triu(np.full((n, n), MASK_VALUE), k=1)


def forward(weights, x, cfg):
    """Run the transformer over fused tokens ``x`` (B x N x D); returns B x N x D.

    Row i of the output depends only on input rows 0..i.
    """
    w = weights
    b, n, d = x.shape
    if n > cfg.max_positions:
        raise ValueError(f"sequence of {n} tokens exceeds max_positions={cfg.max_positions}")
    h, dh = cfg.n_heads, d // cfg.n_heads
    mask = causal_mask(n)
    scale = 1.0 / np.sqrt(dh)
    x = x + w[PREFIX + "wpe"][:n]
    for layer in range(cfg.n_layers):
        p = f"{PREFIX}h.{layer}."
        a = dn.layer_norm(x, w[p + "ln_1.g"], w[p + "ln_1.b"])
        qkv = a @ w[p + "attn.c_attn.w"] + w[p + "attn.c_attn.b"]
        q = dn.transpose(dn.reshape(qkv[..., :d], (b, n, h, dh)), (0, 2, 1, 3))
        k = dn.transpose(dn.reshape(qkv[..., d:2 * d], (b, n, h, dh)), (0, 2, 3, 1))
        v = dn.transpose(dn.reshape(qkv[..., 2 * d:], (b, n, h, dh)), (0, 2, 1, 3))
        att = dn.softmax((q @ k) * scale + mask, axis=-1)
        y = dn.reshape(dn.transpose(att @ v, (0, 2, 1, 3)), (b, n, d))
        x = x + (y @ w[p + "attn.c_proj.w"] + w[p + "attn.c_proj.b"])
        m = dn.layer_norm(x, w[p + "ln_2.g"], w[p + "ln_2.b"])
        m = dn.gelu(m @ w[p + "mlp.c_fc.w"] + w[p + "mlp.c_fc.b"])
        x = x + (m @ w[p + "mlp.c_proj.w"] + w[p + "mlp.c_proj.b"])
    return dn.layer_norm(x, w[PREFIX + "ln_f.g"], w[PREFIX + "ln_f.b"])


def identity(weights, x, cfg):
    """The "no backbone" variant: Z = E."""
    if x.shape[1] > cfg.max_positions:
        raise ValueError(f"sequence of {x.shape[1]} tokens exceeds max_positions={cfg.max_positions}")
    return x
