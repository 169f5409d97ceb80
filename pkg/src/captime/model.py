"""Assembly of encoder, text abstraction, frozen backbone and mixture decoder."""
import json
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import abstraction, backbone, diffnum as dn, mixture_decoder as moe, ts_encoder
from .container import load_tensors, save_tensors
from .series_prep import n_patches
from .text_embed import DEFAULT_MAX_LEN, Vocabulary, embed_batch

log = logging.getLogger(__name__)

ABLATIONS = {
    "a1": "trainable MLP instead of the pretrained mixer encoder",
    "a2": "no text abstraction (E = T, gate reads Z)",
    "a3": "gate reads Z instead of the text abstraction",
    "a4": "point forecasting with MSE",
    "b1": "finetunable backbone",
    "b2": "randomly initialized backbone",
    "b3": "no backbone (Z = E)",
    "b4": "backbone replaced by a trainable attention layer",
}
UNSUPPORTED = {"b1", "b4"}


@dataclass
class ModelConfig:
    lookback: int = 16
    patch_len: int = 4
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ffn: int = 256
    max_positions: int = 64
    enc_width: int = 64
    enc_blocks: int = 2
    n_experts: int = 4
    top_k: int = 2
    attn_heads: int = 1
    max_text_len: int = DEFAULT_MAX_LEN
    ablation: Optional[str] = None
    freeze_encoder: bool = True
    backbone_weights: Optional[str] = None

    def validate(self):
        if self.ablation is not None and self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; choose from {sorted(ABLATIONS)}")
        if self.ablation in UNSUPPORTED:
            raise backbone.UnsupportedVariant(f"ablation {self.ablation} ({ABLATIONS[self.ablation]}) is unsupported")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError("top_k must lie in [1, n_experts]")
        if self.lookback < self.patch_len:
            raise ValueError("lookback must be at least one patch long")
        if n_patches(self.lookback, self.patch_len) > self.max_positions:
            raise ValueError("max_positions is smaller than the lookback patch count")
        return self

    @property
    def n_patches(self):
        return n_patches(self.lookback, self.patch_len)

    @property
    def point(self):
        return self.ablation == "a4"

    def backbone_config(self, vocab_size):
        return backbone.BackboneConfig(self.n_layers, self.n_heads, self.d_model, self.d_ffn,
                                       self.max_positions, vocab_size)

    def encoder_config(self):
        return ts_encoder.EncoderConfig(self.patch_len, self.enc_width, self.enc_blocks,
                                        self.max_positions, self.d_model)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class ForwardOutput:
    mu: dn.Tensor
    sigma: Optional[dn.Tensor]
    nu: Optional[dn.Tensor]
    s: dn.Tensor
    routing: moe.RoutingDecision
    attention: Optional[np.ndarray]
    extras: dict = field(default_factory=dict)

    def params(self, index=None):
        pick = (lambda t: t.data) if index is None else (lambda t: t.data[index])
        return moe.PatchDistParams(
            mu=pick(self.mu).copy(),
            sigma=None if self.sigma is None else pick(self.sigma).copy(),
            nu=None if self.nu is None else pick(self.nu).copy(),
        )


class CAPTime:
    """The full forecaster. ``params`` maps every tensor name to a :class:`Tensor`."""

    def __init__(self, cfg, vocab, params, encoder_pretrained=False):
        self.cfg = cfg.validate()
        self.vocab = vocab
        self.params = params
        self.encoder_pretrained = encoder_pretrained
        self.bb_cfg = cfg.backbone_config(len(vocab))
        self.enc_cfg = cfg.encoder_config()
        self._check_partition()

    # -- construction --------------------------------------------------------
    @classmethod
    def build(cls, cfg, vocab, seed=0, encoder_params=None):
        cfg.validate()
        bb_cfg = cfg.backbone_config(len(vocab))
        if cfg.backbone_weights and cfg.ablation != "b2":
            bb = backbone.load_weights(cfg.backbone_weights, bb_cfg)
        else:
            bb = backbone.seeded_init(bb_cfg, seed)
        enc_cfg = cfg.encoder_config()
        params = OrderedDict()
        if cfg.ablation == "a1":
            params.update(ts_encoder.init_mlp(enc_cfg, seed + 1))
        else:
            enc = encoder_params if encoder_params is not None else ts_encoder.init_mixer(enc_cfg, seed + 1)
            for name, t in enc.items():
                params[name] = dn.Tensor(np.array(t.data, copy=True), requires_grad=not cfg.freeze_encoder, name=name)
            params.update(ts_encoder.init_connector(enc_cfg, seed + 2))
        if cfg.ablation != "a2":
            params.update(abstraction.init_params(cfg.d_model, cfg.max_positions, seed + 3, bb))
        params.update(moe.init_params(cfg.d_model, cfg.patch_len, cfg.n_experts, seed + 4, point=cfg.point))
        params.update(bb)
        for name in bb:
            params[name].requires_grad = False
        params = OrderedDict(sorted(params.items()))
        return cls(cfg, vocab, params, encoder_pretrained=encoder_params is not None)

    def _check_partition(self):
        for name, t in self.params.items():
            if not isinstance(t, dn.Tensor):
                raise TypeError(f"parameter {name} is not a Tensor")
            if name.startswith(backbone.PREFIX) and t.requires_grad:
                raise ValueError(f"backbone tensor {name} must be frozen")

    # -- parameter views ---------------------------------------------------------
    def partition(self):
        """(trainable names, frozen names): disjoint and covering every tensor."""
        trainable = [k for k, t in self.params.items() if t.requires_grad]
        frozen = [k for k, t in self.params.items() if not t.requires_grad]
        if set(trainable) & set(frozen) or len(trainable) + len(frozen) != len(self.params):
            raise RuntimeError("parameter partition is not a disjoint cover")
        return trainable, frozen

    def trainable(self):
        return [t for t in self.params.values() if t.requires_grad]

    @property
    def table(self):
        return self.params[backbone.PREFIX + "wte"].data

    def encoder_params(self):
        return OrderedDict((k, v) for k, v in self.params.items() if k.startswith("encoder."))

    # -- forward -------------------------------------------------------------------
    def forward(self, patches, prompts):
        """Patches (B x N x L_p, normalized) and one prompt per row -> distribution tensors."""
        cfg = self.cfg
        patches = np.asarray(patches, dtype=np.float64)
        if patches.ndim != 3 or patches.shape[0] != len(prompts):
            raise ValueError("expected B x N x L_p patches and one prompt per row")
        n = patches.shape[1]
        tokens = ts_encoder.encode(self.params, patches, self.enc_cfg,
                                   variant="mlp" if cfg.ablation == "a1" else "mixer")
        attention = None
        abs_values = None
        if cfg.ablation == "a2":
            fused = tokens
        else:
            emb, key_mask = embed_batch(prompts, self.table)
            abs_set = abstraction.abstract(self.params, emb, key_mask, n, cfg.attn_heads)
            attention = abs_set.attention
            abs_values = abs_set.values
            fused = abstraction.fuse(tokens, abs_set)
        run = backbone.identity if cfg.ablation == "b3" else backbone.forward
        z = run(self.params, fused, self.bb_cfg)
        gate_input = z if cfg.ablation in ("a2", "a3") else abs_values
        s = moe.gate_probs(self.params, gate_input)
        g, decision = moe.route(s, cfg.top_k)
        mu, sigma, nu = moe.decode(self.params, z, g, cfg.patch_len, cfg.n_experts, point=cfg.point)
        return ForwardOutput(mu, sigma, nu, s, decision, attention,
                             extras={"tokens": tokens, "fused": fused, "z": z, "abstraction": abs_values})

    def loss(self, patches, targets, prompts, alpha):
        """Total objective and its parts (NLL or MSE, load balance)."""
        out = self.forward(patches, prompts)
        if self.cfg.point:
            main = moe.mse_loss(out.mu, targets)
        else:
            main = moe.nll_loss(out.mu, out.sigma, out.nu, targets)
        lb = moe.load_balance_loss(out.s, out.routing, alpha)
        return main + lb, main, lb, out

    # -- persistence -----------------------------------------------------------------
    def manifest(self, extra=None):
        trainable, frozen = self.partition()
        m = {
            "format": "captime-checkpoint/1",
            "model_config": self.cfg.to_dict(),
            "vocab_size": len(self.vocab),
            "vocab_hash": self.vocab.digest(),
            "encoder_pretrained": self.encoder_pretrained,
            "trainable": trainable,
            "frozen": frozen,
        }
        if extra:
            m.update(extra)
        return m

    def save(self, directory, extra=None):
        """Write ``model.ckpt``, ``manifest.json`` and ``vocab.txt`` into ``directory``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = self.manifest(extra)
        text = json.dumps(manifest, indent=2, sort_keys=True)
        save_tensors(directory / "model.ckpt", {k: t.data for k, t in self.params.items()},
                     metadata={"manifest": text})
        (directory / "manifest.json").write_text(text + "\n", encoding="utf-8")
        self.vocab.save(directory / "vocab.txt")
        return directory / "model.ckpt"

    @classmethod
    def load(cls, path):
        path = Path(path)
        directory = path if path.is_dir() else path.parent
        ckpt = directory / "model.ckpt" if path.is_dir() else path
        tensors, meta = load_tensors(ckpt)
        manifest = json.loads(meta["manifest"])
        vocab = Vocabulary.load(directory / "vocab.txt")
        if vocab.digest() != manifest["vocab_hash"]:
            raise ValueError("vocab.txt does not match the checkpoint's vocabulary hash")
        cfg = ModelConfig.from_dict(manifest["model_config"])
        frozen = set(manifest["frozen"])
        listed = frozen | set(manifest["trainable"])
        if listed != set(tensors):
            raise ValueError("checkpoint tensors and manifest partition disagree")
        params = OrderedDict((k, dn.Tensor(tensors[k], requires_grad=k not in frozen, name=k)) for k in sorted(tensors))
        model = cls(cfg, vocab, params, encoder_pretrained=manifest.get("encoder_pretrained", False))
        return model, manifest
