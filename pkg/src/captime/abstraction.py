"""Text abstraction: per-position learnable queries cross-attending into text embeddings."""
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import diffnum as dn
from .backbone import MASK_VALUE, PREFIX as BB
from .text_embed import QUERY_ID


@dataclass
class AbstractionSet:
    values: dn.Tensor  # B x N x D
    attention: np.ndarray  # B x N x N_s, averaged over heads; read-only copy

    def __post_init__(self):
        self.attention.setflags(write=False)


QUERY_INIT_GAIN = 0.1


def _rms(x):
    return float(np.sqrt(np.mean(np.square(x)))) or 1.0


def init_params(d_model, max_positions, seed, backbone_weights=None):
    """Queries start at the ``<query>`` token embedding plus each position's embedding.

    The projections are scaled by the RMS of what they read (the query table
    for W_Q, the frozen token table for W_K and W_V), so keys and values
    start at unit scale whatever the embedding scale. Queries start
    ``QUERY_INIT_GAIN`` times smaller, which keeps the first attention maps
    close to uniform: a sharp random map can lock onto an uninformative
    word before the text signal is found.
    """
    rng = np.random.default_rng(seed)
    if backbone_weights is not None:
        table = backbone_weights[BB + "wte"].data
        query = table[QUERY_ID][None, :] + backbone_weights[BB + "wpe"].data[:max_positions]
    else:
        table = rng.normal(0.0, 0.02, size=(4, d_model))
        query = rng.normal(0.0, 0.02, size=(max_positions, d_model))
    scale = {"wq": _rms(query) / QUERY_INIT_GAIN, "wk": _rms(table), "wv": _rms(table)}
    p = OrderedDict()
    p["abstraction.query"] = np.array(query, copy=True)
    for name in ("wq", "wk", "wv"):
        std = 1.0 / (np.sqrt(d_model) * scale[name])
        p[f"abstraction.{name}.w"] = rng.normal(0.0, std, size=(d_model, d_model))
        p[f"abstraction.{name}.b"] = np.zeros(d_model)
    return OrderedDict((k, dn.Tensor(v, True, k)) for k, v in p.items())


def abstract(params, text_emb, key_mask, n_tokens, n_heads=1):
    """A_i = softmax(Q_i K^T / sqrt(d)) V for token positions 0..n_tokens-1.

    ``text_emb`` is B x N_s x D (frozen), ``key_mask`` B x N_s marks real
    tokens. No output projection is applied.
    """
    q_table = params["abstraction.query"]
    if n_tokens > q_table.shape[0]:
        raise IndexError(f"position {n_tokens - 1} is outside the query table ({q_table.shape[0]} rows)")
    text_emb = np.asarray(text_emb, dtype=np.float64)
    b, n_s, d = text_emb.shape
    if n_s == 0:
        raise ValueError("text embedding is empty; use a single pad row when there is no text")
    if d % n_heads:
        raise ValueError("d_model must be divisible by the abstraction head count")
    dh = d // n_heads
    q = q_table[:n_tokens] @ params["abstraction.wq.w"] + params["abstraction.wq.b"]
    k = text_emb @ params["abstraction.wk.w"] + params["abstraction.wk.b"]
    v = text_emb @ params["abstraction.wv.w"] + params["abstraction.wv.b"]
    bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, MASK_VALUE)
    if n_heads == 1:
        scores = q @ dn.transpose(k, (0, 2, 1)) * (1.0 / np.sqrt(dh)) + bias[:, None, :]
        att = dn.softmax(scores, axis=-1)
        out = att @ v
        att_np = att.data.copy()
    else:
        qh = dn.transpose(dn.reshape(q, (n_tokens, n_heads, dh)), (1, 0, 2))
        kh = dn.transpose(dn.reshape(k, (b, n_s, n_heads, dh)), (0, 2, 3, 1))
        vh = dn.transpose(dn.reshape(v, (b, n_s, n_heads, dh)), (0, 2, 1, 3))
        att = dn.softmax(qh @ kh * (1.0 / np.sqrt(dh)) + bias[:, None, None, :], axis=-1)
        out = dn.reshape(dn.transpose(att @ vh, (0, 2, 1, 3)), (b, n_tokens, d))
        att_np = att.data.mean(axis=1)
    return AbstractionSet(out, att_np)


def fuse(tokens, abstraction):
    """E_i = T_i + A_i."""
    a = abstraction.values if isinstance(abstraction, AbstractionSet) else dn.as_tensor(abstraction)
    if tuple(tokens.shape) != tuple(a.shape):
        raise dn.ShapeError(f"cannot fuse tokens {tokens.shape} with abstraction {a.shape}")
    return tokens + a
