"""Command-line entry point: ``captime <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command writes ``report.json`` (a :class:`MetricReport`) and a
``manifest.json`` into ``--out``.
"""
import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import diffnum as dn
from . import inference, trainer
from .config import ConfigError, hashable_view, load_config, section
from .data_io import SyntheticSpec, generate_synthetic, load_csv, write_csv
from .metrics import MetricReport, config_hash, file_hash
from .model import ABLATIONS, UNSUPPORTED, CAPTime, ModelConfig
from .series_prep import SeriesWindow
from .text_embed import PAD_ID, TextPrompt, Vocabulary
from .ts_encoder import PretrainConfig

log = logging.getLogger("captime")

SUPPORTED_ABLATIONS = sorted(set(ABLATIONS) - UNSUPPORTED)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _out_dir(args):
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args, extra=None):
    overrides = dict(extra or {})
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "ablation", None):
        overrides["model.ablation"] = args.ablation
    if getattr(args, "data", None):
        overrides["data.dir"] = args.data
    cfg = load_config(args.config, overrides)
    for key in ("train.seed", "pretrain.seed", "synth.seed"):
        if getattr(args, "seed", None) is not None:
            cfg[key] = args.seed
        else:
            cfg.setdefault(key, cfg["seed"])
    return cfg


def _data_paths(cfg):
    if "data.series" in cfg:
        return Path(cfg["data.series"]), (Path(cfg["data.texts"]) if cfg.get("data.texts") else None)
    if "data.dir" in cfg:
        d = Path(cfg["data.dir"])
        texts = d / "texts.jsonl"
        return d / "series.csv", texts if texts.exists() else None
    raise UsageError("no data given: set data.dir or data.series in --config, or pass --data DIR")


def _load_corpus(cfg):
    series, texts = _data_paths(cfg)
    corpus = load_csv(series, texts, splits=cfg["data.splits"])
    digest = {"series_sha256": file_hash(series)}
    if texts is not None:
        digest["texts_sha256"] = file_hash(texts)
    return corpus, digest


def _model_config(cfg):
    return section(cfg, "model", ModelConfig).validate()


def _train_vocab(corpus, cfg):
    """Vocabulary from texts that end inside the training split only."""
    hi = corpus.split_bounds()["train"][1]
    t_end = corpus.timestamps[hi - 1]
    return Vocabulary.build([r.text for r in corpus.texts if r.end <= t_end], min_freq=cfg["vocab.min_freq"])


def _horizons(args, cfg, model_cfg):
    if getattr(args, "horizon", None):
        hs = args.horizon
    else:
        hs = cfg.get("eval.horizons") or (model_cfg.patch_len,)
    if any(h < 1 for h in hs):
        raise UsageError("--horizon must be >= 1")
    return list(hs)


def _write_run(out, command, cfg, report, extra=None):
    meta = {"command": command, "version": __version__, "seed": cfg.get("seed"),
            "config": hashable_view(cfg), "config_hash": config_hash(hashable_view(cfg))}
    meta.update(report.metadata)
    report.metadata = meta
    report.validate().write(out / "report.json")
    manifest = {"command": command, "config_hash": meta["config_hash"], "files": {}}
    if extra:
        manifest.update(extra)
    for p in sorted(out.iterdir()):
        if p.is_file() and p.name != "manifest.json":
            manifest["files"][p.name] = file_hash(p)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n",
                                       encoding="utf-8")


def _pretrain(corpus, model_cfg, cfg):
    pcfg = section(cfg, "pretrain", PretrainConfig)
    t0 = time.perf_counter()
    params, curve = trainer.pretrain_encoder(corpus, model_cfg, pcfg)
    log.info("encoder pretraining: %d steps, mse %.4f -> %.4f (%.1fs)", pcfg.steps, curve[0] if curve else float("nan"),
             curve[-1] if curve else float("nan"), time.perf_counter() - t0)
    return params, curve, pcfg


def _encoder_for(corpus, model_cfg, cfg):
    if model_cfg.ablation == "a1":
        return None, {}
    if cfg.get("encoder.path"):
        params, meta = trainer.load_encoder(cfg["encoder.path"])
        return params, {"encoder_sha256": file_hash(cfg["encoder.path"])}
    params, curve, _ = _pretrain(corpus, model_cfg, cfg)
    return params, {"encoder_pretrain_final_mse": curve[-1] if curve else None}


def _train_one(corpus, data_digest, cfg, out, encoder=None):
    model_cfg = _model_config(cfg)
    tcfg = section(cfg, "train", trainer.TrainConfig).validate(model_cfg)
    vocab = _train_vocab(corpus, cfg)
    if encoder is None:
        encoder = _encoder_for(corpus, model_cfg, cfg)
    enc_params, enc_meta = encoder
    model = CAPTime.build(model_cfg, vocab, seed=cfg["seed"], encoder_params=enc_params)
    train_sets = trainer.build_training_sets(corpus, model_cfg, vocab, "train", tcfg.stride, tcfg.rollout)
    try:
        val_sets = trainer.build_training_sets(corpus, model_cfg, vocab, "val", tcfg.stride, tcfg.rollout)
    except ValueError:
        val_sets = None
    t0 = time.perf_counter()
    result = trainer.train(model, train_sets, tcfg, val_sets, out_dir=out,
                           extra_manifest={"data": data_digest, "config_hash": config_hash(hashable_view(cfg)),
                                           "seed": cfg["seed"], **enc_meta})
    log.info("trained %d steps in %.1fs", result.steps, time.perf_counter() - t0)
    return model, result


def _evaluate(model, corpus, cfg, horizons):
    table = inference.evaluate(model, corpus, horizons, split=cfg["eval.split"], stride=cfg.get("eval.stride"),
                               season=cfg["eval.season"])
    return table


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    cfg = _config(args)
    out = _out_dir(args)
    spec = section(cfg, "synth", SyntheticSpec)
    spec.splits = tuple(cfg["data.splits"])
    spec.regimes = tuple(spec.regimes)
    corpus = generate_synthetic(spec)
    write_csv(corpus, out / "series.csv", out / "texts.jsonl")
    ann = {"spec": spec.to_dict(), "regimes": corpus.annotations["regimes"]}
    (out / "synth.json").write_text(json.dumps(ann, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    counts = {r: corpus.annotations["regimes"].count(r) for r in spec.regimes}
    report = MetricReport({}, {"dataset": {"length": len(corpus), "channels": corpus.n_channels,
                                           "texts": len(corpus.texts), "regime_counts": counts}})
    _write_run(out, "synth", cfg, report)
    return 0


def cmd_pretrain(args):
    cfg = _config(args)
    out = _out_dir(args)
    corpus, digest = _load_corpus(cfg)
    model_cfg = _model_config(cfg)
    params, curve, pcfg = _pretrain(corpus, model_cfg, cfg)
    trainer.save_encoder(out / "encoder.ckpt", params,
                         metadata={"pretrain_config": json.dumps(dataclasses.asdict(pcfg), sort_keys=True),
                                   "model_config": json.dumps(model_cfg.to_dict(), sort_keys=True)})
    with (out / "pretrain_curve.csv").open("w", encoding="utf-8") as fh:
        fh.write("step,masked_mse\n")
        for i, v in enumerate(curve, start=1):
            fh.write(f"{i},{v!r}\n")
    report = MetricReport({}, {"data": digest, "pretrain_final_mse": curve[-1] if curve else None})
    _write_run(out, "pretrain-encoder", cfg, report)
    return 0


def cmd_train(args):
    cfg = _config(args)
    out = _out_dir(args)
    corpus, digest = _load_corpus(cfg)
    model, result = _train_one(corpus, digest, cfg, out)
    horizons = _horizons(args, cfg, model.cfg)
    table = _evaluate(model, corpus, cfg, horizons)
    last = result.history[-1] if result.history else {}
    report = MetricReport(table, {"data": digest, "checkpoint_sha256": file_hash(result.checkpoint),
                                  "final_train_nll": last.get("train_nll"),
                                  "final_val_nll": last.get("val_nll") or None,
                                  "split": cfg["eval.split"]})
    _write_run(out, "train", cfg, report)
    return 0


def _load_checkpoint(args):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    return CAPTime.load(args.checkpoint)


def cmd_evaluate(args):
    cfg = _config(args)
    out = _out_dir(args)
    model, manifest = _load_checkpoint(args)
    corpus, digest = _load_corpus(cfg)
    horizons = _horizons(args, cfg, model.cfg)
    table = _evaluate(model, corpus, cfg, horizons)
    ckpt = Path(args.checkpoint)
    ckpt = ckpt / "model.ckpt" if ckpt.is_dir() else ckpt
    report = MetricReport(table, {"data": digest, "checkpoint_sha256": file_hash(ckpt), "split": cfg["eval.split"]})
    _write_run(out, "evaluate", cfg, report)
    return 0


def _window_at(corpus, model, at):
    h = model.cfg.lookback
    end = len(corpus) if at is None else int(at)
    if end < h or end > len(corpus):
        raise UsageError(f"forecast origin {end} leaves no {h}-step lookback inside the series")
    w = SeriesWindow(corpus.values[end - h:end], corpus.timestamps[end - h:end], list(corpus.channel_names))
    return w, end


def cmd_forecast(args):
    cfg = _config(args)
    out = _out_dir(args)
    model, _ = _load_checkpoint(args)
    corpus, digest = _load_corpus(cfg)
    at = args.at if args.at is not None else cfg.get("forecast.at")
    window, end = _window_at(corpus, model, at)
    rows = {}
    for f in _horizons(args, cfg, model.cfg):
        req = inference.ForecastRequest(window, corpus.texts, f, tuple(cfg["eval.quantiles"]), args.explain)
        res = inference.forecast(model, req)
        inference.write_forecast_json(out / f"forecast_{f}.json", res)
        inference.write_forecast_csv(out / f"forecast_{f}.csv", res)
        if args.explain and res.attention:
            inference.write_attention_csv(out / f"attention_{f}.csv", res.attention, res.prompt, model.vocab,
                                          res.channel_names)
        rows[str(f)] = {"steps": res.steps}
    report = MetricReport(rows, {"data": digest, "origin": end})
    _write_run(out, "forecast", cfg, report)
    return 0


def cmd_ablate(args):
    variant = args.variant or args.ablation
    if not variant:
        raise UsageError("ablate needs a variant, e.g. 'captime ablate a2'")
    if variant in UNSUPPORTED:
        raise UsageError(f"ablation {variant} is unsupported ({ABLATIONS[variant]})")
    if variant not in ABLATIONS:
        raise UsageError(f"unknown ablation {variant!r}; choose from {SUPPORTED_ABLATIONS}")
    args.ablation = None
    cfg = _config(args)
    out = _out_dir(args)
    corpus, digest = _load_corpus(cfg)
    base_cfg = _model_config(cfg)
    shared = _encoder_for(corpus, base_cfg, cfg)
    tables = {}
    for name, abl in (("full", None), (variant, variant)):
        run_cfg = dict(cfg, **{"model.ablation": abl})
        mcfg = _model_config(run_cfg)
        enc = (None, {}) if mcfg.ablation == "a1" else shared
        model, _ = _train_one(corpus, digest, run_cfg, out / name, encoder=enc)
        tables[name] = _evaluate(model, corpus, run_cfg, _horizons(args, run_cfg, mcfg))
    rows = {}
    for h, full_row in tables["full"].items():
        v_row = tables[variant][h]
        rows[h] = {f"full_{k}": v for k, v in full_row.items()}
        rows[h].update({f"{variant}_{k}": v for k, v in v_row.items()})
        rows[h]["mse_ratio_full_over_variant"] = full_row["mse"] / v_row["mse"]
    report = MetricReport(rows, {"data": digest, "variant": variant, "description": ABLATIONS[variant]})
    _write_run(out, "ablate", cfg, report)
    return 0


def tiny_config():
    """Gradient-check configuration: H=8, L_p=4, D=16, M=2, K=1, one backbone layer."""
    return ModelConfig(lookback=8, patch_len=4, d_model=16, n_layers=1, n_heads=2, d_ffn=32, max_positions=8,
                       enc_width=8, enc_blocks=1, n_experts=2, top_k=1)


def run_gradcheck(model_cfg, seed=0, tol=1e-3, batch=2):
    """Finite-difference check of the full loss against every trainable tensor."""
    spec = SyntheticSpec(length=160, period=8, segment=model_cfg.lookback, seed=seed)
    corpus = generate_synthetic(spec)
    vocab = Vocabulary.build([r.text for r in corpus.texts], min_freq=1)
    model = CAPTime.build(model_cfg, vocab, seed=seed)
    ex = trainer.build_examples(corpus, model_cfg, vocab, "train", stride=model_cfg.lookback)
    b = ex.take(np.arange(min(batch, len(ex))))
    trainable = {k: t for k, t in model.params.items() if t.requires_grad}

    def f():
        total, _, _, _ = model.loss(b.patches, b.targets, b.prompts, alpha=0.01)
        return total

    return dn.grad_check(f, trainable, tol=tol)


def cmd_gradcheck(args):
    cfg = _config(args)
    out = _out_dir(args)
    mcfg = dataclasses.replace(tiny_config(), ablation=args.ablation)
    t0 = time.perf_counter()
    rep = run_gradcheck(mcfg, seed=cfg["seed"])
    log.info("gradient check finished in %.1fs", time.perf_counter() - t0)
    for line in rep.lines():
        log.info("%s", line)
    per = {k: {"max_rel_err": p.max_rel_err, "max_abs_err": p.max_abs_err} for k, p in rep.params.items()}
    report = MetricReport({}, {"passed": rep.passed, "max_rel_err": rep.max_rel_err, "tolerance": 1e-3,
                               "params": per, "model_config": mcfg.to_dict()})
    _write_run(out, "gradcheck", cfg, report)
    print(f"gradcheck {'PASS' if rep.passed else 'FAIL'} max rel err {rep.max_rel_err:.3e}")
    return 0 if rep.passed else 1


def _swap_words(prompt, vocab, a, b):
    ia, ib = vocab.id(a), vocab.id(b)
    ids = [ib if t == ia else ia if t == ib else t for t in prompt.token_ids]
    return TextPrompt(ids, list(prompt.spans), prompt.source)


def cmd_inspect_attn(args):
    cfg = _config(args)
    out = _out_dir(args)
    model, _ = _load_checkpoint(args)
    corpus, digest = _load_corpus(cfg)
    horizon = _horizons(args, cfg, model.cfg)[0]
    batch = inference.eval_windows(corpus, model, cfg["eval.split"], horizon, cfg.get("eval.stride"))
    i = args.window
    if not 0 <= i < len(batch.prompts):
        raise UsageError(f"--window must lie in [0, {len(batch.prompts)})")
    x = batch.inputs[i:i + 1]
    prompt = batch.prompts[i]
    variants = {"text": prompt, "no_text": TextPrompt([PAD_ID], [(0, 0)], "")}
    if "surge" in model.vocab and "drop" in model.vocab:
        variants["swapped"] = _swap_words(prompt, model.vocab, "surge", "drop")
    from .series_prep import instance_normalize

    z, stats = instance_normalize(x.T)
    rows = {}
    for name, p in variants.items():
        mu, _, _, attn = inference.generate(model, z.T, [p], horizon, explain=True)
        path = (mu * stats.std[:, None] + stats.mean[:, None])[0]
        rows[name] = {"point": path.tolist(), "mean_slope": float(np.diff(path).mean()) if horizon > 1 else 0.0}
        if attn:
            inference.write_attention_csv(out / f"attention_{name}.csv", attn, p, model.vocab,
                                          [corpus.channel_names[batch.channels[i]]])
    rows["target"] = {"point": batch.targets[i].tolist()}
    report = MetricReport({str(horizon): {k: v["mean_slope"] for k, v in rows.items() if "mean_slope" in v}},
                          {"data": digest, "window_start": int(batch.starts[i]), "paths": rows,
                           "prompt": [model.vocab.token(t) for t in prompt.token_ids]})
    _write_run(out, "inspect-attn", cfg, report)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

COMMANDS = {
    "synth": (cmd_synth, "write a synthetic regime corpus (series.csv, texts.jsonl)"),
    "pretrain-encoder": (cmd_pretrain, "masked-patch pretraining of the temporal encoder"),
    "train": (cmd_train, "train a model and evaluate it on the test split"),
    "evaluate": (cmd_evaluate, "score a checkpoint at one or more horizons"),
    "forecast": (cmd_forecast, "forecast from the end of a series (or --at)"),
    "ablate": (cmd_ablate, "train the full model and one ablation with identical budgets"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every trainable gradient"),
    "inspect-attn": (cmd_inspect_attn, "attention maps and text on/off/swapped forecasts for one window"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value settings file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--horizon", type=int, action="append", metavar="F", help="forecast horizon (repeatable)")
    common.add_argument("--ablation", choices=SUPPORTED_ABLATIONS, help="model variant")
    common.add_argument("--explain", action="store_true", help="also write attention maps")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--data", metavar="DIR", help="folder with series.csv and texts.jsonl")
    common.add_argument("--checkpoint", metavar="PATH", help="checkpoint directory or model.ckpt")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="captime", description="Context-aware probabilistic forecasting.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name == "ablate":
            p.add_argument("variant", nargs="?", help=f"one of {SUPPORTED_ABLATIONS}")
        if name == "forecast":
            p.add_argument("--at", type=int, help="series index where the forecast starts")
        if name == "inspect-attn":
            p.add_argument("--window", type=int, default=0, help="index into the evaluation windows")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return exc.code if isinstance(exc.code, int) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    func = COMMANDS[args.command][0]
    try:
        return func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"captime {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError, FloatingPointError, KeyError, NotImplementedError) as exc:
        print(f"captime {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
