"""Text-gated sparse mixture of Student's t heads.

Each of M heads maps a backbone token to raw ``(mu, sigma, nu)`` for the L_p
steps of the next patch. A softmax gate over M experts picks the top K per
token; the selected heads' raw outputs are summed with their (unrenormalized)
gate probabilities, then the links ``sigma = softplus + 1e-4`` and
``nu = 1 + softplus`` are applied.
"""
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import diffnum as dn
from . import kernels

SIGMA_FLOOR = 1e-4


@dataclass
class PatchDistParams:
    mu: np.ndarray
    sigma: Optional[np.ndarray] = None
    nu: Optional[np.ndarray] = None

    @property
    def is_probabilistic(self):
        return self.sigma is not None


@dataclass
class RoutingDecision:
    s: np.ndarray         # ... x M gate probabilities
    selected: np.ndarray  # ... x K expert indices, best first
    g: np.ndarray         # ... x M, s on selected experts and 0 elsewhere

    @property
    def k(self):
        return self.selected.shape[-1]


def init_params(d_model, patch_len, n_experts, seed, point=False):
    rng = np.random.default_rng(seed)
    out_dim = patch_len if point else 3 * patch_len
    p = OrderedDict()
    p["gate.w"] = rng.normal(0.0, 0.02, size=(d_model, n_experts))
    p["gate.b"] = np.zeros(n_experts)
    for m in range(n_experts):
        p[f"decoder.head.{m}.w"] = rng.normal(0.0, 0.02, size=(d_model, out_dim))
        p[f"decoder.head.{m}.b"] = np.zeros(out_dim)
    return OrderedDict((k, dn.Tensor(v, True, k)) for k, v in p.items())


def gate_probs(params, gate_input):
    return dn.softmax(dn.as_tensor(gate_input) @ params["gate.w"] + params["gate.b"], axis=-1)


def route(s, k):
    """Top-K selection on gate probabilities ``s`` (tensor or array, ... x M).

    Returns ``(g, decision)`` where ``g`` is a tensor equal to ``s`` on the
    selected experts and exactly zero elsewhere, so unselected heads get no
    gradient from that token.
    """
    s_arr = s.data if isinstance(s, dn.Tensor) else np.asarray(s, dtype=np.float64)
    m = s_arr.shape[-1]
    if not 1 <= k <= m:
        raise ValueError(f"top-K needs 1 <= K <= M, got K={k}, M={m}")
    mask = kernels.topk_mask(s_arr, k)
    order = np.argsort(-np.where(mask > 0, s_arr, -np.inf), axis=-1, kind="stable")[..., :k]
    g = dn.as_tensor(s) * mask
    return g, RoutingDecision(s=s_arr.copy(), selected=order, g=g.data.copy())


def combine_heads(params, z, g, n_experts):
    """h_i = sum_m g_im Head_m(Z_i), raw parameter space."""
    h = None
    for m in range(n_experts):
        out = z @ params[f"decoder.head.{m}.w"] + params[f"decoder.head.{m}.b"]
        term = out * g[..., m:m + 1]
        h = term if h is None else h + term
    return h


def link(h, patch_len):
    """Split raw output into (mu, sigma, nu) tensors."""
    mu = h[..., :patch_len]
    sigma = dn.softplus(h[..., patch_len:2 * patch_len]) + SIGMA_FLOOR
    nu = dn.softplus(h[..., 2 * patch_len:]) + 1.0
    return mu, sigma, nu


def decode(params, z, g, patch_len, n_experts, point=False):
    h = combine_heads(params, z, g, n_experts)
    if h.shape[-1] != (patch_len if point else 3 * patch_len):
        raise dn.ShapeError("head output width does not match the patch length")
    if point:
        return h, None, None
    return link(h, patch_len)


def student_t_logpdf(y, mu, sigma, nu):
    """Elementwise log density of the location-scale Student's t (numpy)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    if np.any(sigma <= 0) or np.any(nu <= 0):
        raise ValueError("Student's t needs sigma > 0 and nu > 0")
    return kernels.t_logpdf(y, mu, sigma, nu)


def student_t_logpdf_graph(y, mu, sigma, nu):
    """Differentiable version of :func:`student_t_logpdf` built from graph primitives."""
    y = dn.as_tensor(y)
    half_np1 = (nu + 1.0) * 0.5
    z = (y - mu) / sigma
    return (dn.lgamma(half_np1) - dn.lgamma(nu * 0.5)
            - 0.5 * dn.log(nu * math.pi) - dn.log(sigma)
            - half_np1 * dn.log(1.0 + z * z / nu))


def nll_loss(mu, sigma, nu, targets):
    """Mean negative log-likelihood over every (token, step) element."""
    targets = np.asarray(targets, dtype=np.float64)
    if tuple(targets.shape) != tuple(mu.shape):
        raise dn.ShapeError(f"targets {targets.shape} do not match parameters {mu.shape}")
    return -dn.reduce_mean(student_t_logpdf_graph(targets, mu, sigma, nu))


def mse_loss(mu, targets):
    targets = np.asarray(targets, dtype=np.float64)
    if tuple(targets.shape) != tuple(mu.shape):
        raise dn.ShapeError(f"targets {targets.shape} do not match predictions {mu.shape}")
    err = mu - targets
    return dn.reduce_mean(err * err)


def expert_load(decision):
    """(f, P): share of (token, slot) routings per expert and mean gate probability."""
    s = decision.s.reshape(-1, decision.s.shape[-1])
    sel = decision.selected.reshape(-1, decision.k)
    m = s.shape[1]
    f = np.bincount(sel.ravel(), minlength=m) / float(sel.size)
    return f, s.mean(axis=0)


def load_balance_loss(s, decision, alpha):
    """alpha * M * sum_m f_m * P_m; f is a constant, the gradient flows through P."""
    s = dn.as_tensor(s)
    m = s.shape[-1]
    f, _ = expert_load(decision)
    n_tokens = s.data.size // m
    p = dn.reduce_sum(dn.reshape(s, (n_tokens, m)), axis=0) * (1.0 / n_tokens)
    return dn.reduce_sum(p * f) * (alpha * m)


def point_forecast(params):
    """Mode of each per-step Student's t, i.e. its location."""
    return np.array(params.mu, copy=True)


def quantile(params, q):
    if not params.is_probabilistic:
        raise ValueError("point-forecast parameters carry no distribution")
    if not 0.0 < q < 1.0:
        raise ValueError("quantile level must lie in (0, 1)")
    return params.mu + params.sigma * kernels.t_ppf(np.full(np.shape(params.mu), q), params.nu)


def cdf(params, y):
    z = (np.asarray(y, dtype=np.float64) - params.mu) / params.sigma
    return kernels.t_cdf(z, np.broadcast_to(params.nu, z.shape))


def sample(params, rng, n=1):
    """``n`` draws per element: mu + sigma * t_nu."""
    shape = (n,) + np.shape(params.mu)
    return params.mu + params.sigma * rng.standard_t(np.broadcast_to(params.nu, shape))
