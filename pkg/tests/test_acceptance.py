"""Acceptance criteria 1-9. Each test prints one ``PASS``/``FAIL`` line.

Criteria 5-7 share one synthetic regime corpus and one trained full model;
the first test that needs it pays the training cost (about a minute in all).
"""
import contextlib
import dataclasses
import time

import numpy as np
import pytest
from scipy import integrate, stats

from captime import cli, inference, trainer
from captime import metrics as mt
from captime import mixture_decoder as moe
from captime.container import load_tensors
from captime.data_io import SyntheticSpec, generate_synthetic
from captime.model import CAPTime, ModelConfig
from captime.series_prep import instance_normalize
from captime.text_embed import TextPrompt, Vocabulary
from captime.ts_encoder import PretrainConfig

SPEC = SyntheticSpec(length=20000, period=8, noise=0.1, slope=0.3, segment=16, seed=0)
MODEL = ModelConfig(lookback=16, patch_len=8, d_model=64, n_layers=2, n_heads=4, d_ffn=64, max_positions=16,
                    enc_width=64, enc_blocks=2, n_experts=4, top_k=2)
TRAIN = trainer.TrainConfig(steps=500, lr=6e-3, batch_size=64, stride=16, rollout=0)
PRETRAIN = PretrainConfig(steps=100)
EVAL_STRIDE = 16


@pytest.fixture
def criterion(pytestconfig):
    """Print ``PASS``/``FAIL criterion n: summary`` around the body of a test."""
    capman = pytestconfig.pluginmanager.getplugin("capturemanager")

    @contextlib.contextmanager
    def run(n, title):
        info = {}
        t0 = time.perf_counter()
        ok = False
        try:
            yield info
            ok = True
        finally:
            detail = ", ".join(f"{k}={v}" for k, v in info.items())
            line = f"{'PASS' if ok else 'FAIL'} criterion {n} ({title}): {detail} [{time.perf_counter() - t0:.1f}s]"
            with capman.global_and_fixture_disabled():
                print("\n" + line, flush=True)

    return run


def _train_vocab(corpus):
    hi = corpus.split_bounds()["train"][1]
    t_end = corpus.timestamps[hi - 1]
    return Vocabulary.build([r.text for r in corpus.texts if r.end <= t_end], min_freq=2)


def _fit(corpus, vocab, encoder, ablation=None, seed=0):
    cfg = dataclasses.replace(MODEL, ablation=ablation)
    model = CAPTime.build(cfg, vocab, seed=seed, encoder_params=encoder)
    sets = trainer.build_training_sets(corpus, cfg, vocab, "train", TRAIN.stride, TRAIN.rollout)
    trainer.train(model, sets, dataclasses.replace(TRAIN, seed=seed))
    return model


@pytest.fixture(scope="module")
def regime_run():
    corpus = generate_synthetic(SPEC)
    vocab = _train_vocab(corpus)
    t0 = time.perf_counter()
    encoder, _ = trainer.pretrain_encoder(corpus, MODEL, PRETRAIN)
    full = _fit(corpus, vocab, encoder)
    return {"corpus": corpus, "vocab": vocab, "encoder": encoder, "full": full,
            "seconds": time.perf_counter() - t0}


# ---------------------------------------------------------------------------

def test_c1_gradient_fidelity(criterion):
    with criterion(1, "full-model gradients vs central differences") as info:
        t0 = time.perf_counter()
        rep = cli.run_gradcheck(cli.tiny_config(), seed=0, tol=1e-3)
        elapsed = time.perf_counter() - t0
        info.update(max_rel_err=f"{rep.max_rel_err:.2e}", tensors=len(rep.params), seconds=f"{elapsed:.1f}")
        assert rep.passed and rep.max_rel_err < 1e-3, "\n".join(rep.lines())
        assert elapsed < 60


def test_c2_density_validity(criterion):
    with criterion(2, "Student's t quadrature and limits") as info:
        worst = 0.0
        for sigma in (0.1, 1.0, 10.0):
            for nu in (1.5, 3.0, 30.0):
                pdf = lambda y: np.exp(moe.student_t_logpdf(np.array([y]), 0.0, sigma, nu))[0]
                body, _ = integrate.quad(pdf, -50 * sigma, 50 * sigma, limit=400, epsabs=1e-12, points=[0.0])
                # tails beyond +-50 sigma from the closed-form cdf
                tails = 2 * stats.t.sf(50.0, nu)
                worst = max(worst, abs(body + tails - 1.0))
        y = np.linspace(-20, 20, 401)
        cauchy = np.exp(moe.student_t_logpdf(y, 0.5, 2.0, 1.0))
        err_c = np.max(np.abs(cauchy - 1 / (np.pi * 2.0 * (1 + ((y - 0.5) / 2.0) ** 2))))
        gauss = np.exp(moe.student_t_logpdf(y, 0.5, 2.0, 1e7))
        err_g = np.max(np.abs(gauss - stats.norm.pdf(y, 0.5, 2.0)))
        info.update(max_mass_err=f"{worst:.1e}", cauchy_err=f"{err_c:.1e}", gauss_err=f"{err_g:.1e}")
        assert worst < 1e-4 and err_c < 1e-3 and err_g < 1e-3


def test_c3_routing_contract(criterion, rng):
    with criterion(3, "top-K routing, zero expert gradients, load-balance values") as info:
        # exactly K nonzero gates per token on random inputs through the whole model
        cfg = dataclasses.replace(cli.tiny_config(), n_experts=4, top_k=2)
        model = CAPTime.build(cfg, Vocabulary(["up", "down"]), seed=1)
        for trial in range(5):
            patches = rng.normal(size=(6, 3, 4))
            out = model.forward(patches, [TextPrompt([int(rng.integers(2, 6))]) for _ in range(6)])
            assert np.all((out.routing.g != 0).sum(axis=-1) == 2)
            np.testing.assert_array_equal(np.take_along_axis(out.routing.g, out.routing.selected, -1),
                                          np.take_along_axis(out.routing.s, out.routing.selected, -1))
        # zeroed experts: structurally zero gradient, and finite differences agree
        d, lp, m = 6, 3, 4
        heads = moe.init_params(d, lp, m, seed=2)
        for t in heads.values():
            t.data[...] = rng.normal(scale=0.5, size=t.shape)
        z = rng.normal(size=(1, d))
        y = rng.normal(size=(1, lp))
        s = moe.gate_probs(heads, z)
        _, dec = moe.route(s, 1)
        chosen = int(dec.selected[0, 0])

        def loss():
            g, _ = moe.route(moe.gate_probs(heads, z), 1)
            mu, sigma, nu = moe.decode(heads, z, g, lp, m)
            return moe.nll_loss(mu, sigma, nu, y)

        loss().backward()
        zeroed = [e for e in range(m) if e != chosen]
        fd_max = 0.0
        for e in zeroed:
            for part in ("w", "b"):
                t = heads[f"decoder.head.{e}.{part}"]
                assert np.all(t.grad == 0.0)
                for idx in [(0,) * t.data.ndim, tuple(np.array(t.shape) - 1)]:
                    old = t.data[idx]
                    t.data[idx] = old + 1e-4
                    up = loss().item()
                    t.data[idx] = old - 1e-4
                    down = loss().item()
                    t.data[idx] = old
                    fd_max = max(fd_max, abs(up - down) / 2e-4)
        assert fd_max == 0.0
        assert np.any(heads[f"decoder.head.{chosen}.w"].grad != 0.0)
        # L_b closed forms
        alpha, m = 0.01, 4
        uniform = np.full((8, m), 1.0 / m)
        spread = (np.arange(8) % m)[:, None]
        dec_u = moe.RoutingDecision(s=uniform, selected=spread, g=uniform * (np.arange(m) == spread))
        lb_u = moe.load_balance_loss(uniform, dec_u, alpha).item()
        hot = np.tile(np.eye(m)[0], (8, 1))
        _, dec_h = moe.route(hot, 1)
        lb_h = moe.load_balance_loss(hot, dec_h, alpha).item()
        info.update(lb_uniform=f"{lb_u:.6g}", lb_collapsed=f"{lb_h:.6g}", fd_zeroed=fd_max)
        assert abs(lb_u - alpha) < 1e-6 and abs(lb_h - alpha * m) < 1e-6


def test_c4_frozen_tensors_unchanged(criterion, tmp_path, tiny_corpus, tiny_vocab):
    with criterion(4, "frozen tensors bitwise unchanged after 300 steps") as info:
        model = CAPTime.build(cli.tiny_config(), tiny_vocab, seed=0)
        model.save(tmp_path / "before")
        sets = trainer.build_training_sets(tiny_corpus, model.cfg, tiny_vocab, "train", 4, 0)
        res = trainer.train(model, sets, trainer.TrainConfig(steps=300, lr=1e-2, batch_size=8), out_dir=tmp_path / "after")
        before, _ = load_tensors(tmp_path / "before" / "model.ckpt")
        after, _ = load_tensors(res.checkpoint)
        trainable, frozen = model.partition()
        groups = {g: [k for k in frozen if k.startswith(g)] for g in ("backbone.", "encoder.")}
        assert all(groups.values()) and "backbone.wte" in frozen
        changed_frozen = [k for k in frozen if before[k].tobytes() != after[k].tobytes()]
        changed_trainable = sum(before[k].tobytes() != after[k].tobytes() for k in trainable)
        info.update(frozen=len(frozen), frozen_changed=len(changed_frozen),
                    trainable_changed=f"{changed_trainable}/{len(trainable)}", steps=res.steps)
        assert res.steps == 300 and not changed_frozen and changed_trainable > 0


def _trend_flip_rate(model, corpus, horizon=8):
    batch = inference.eval_windows(corpus, model, "test", horizon, stride=EVAL_STRIDE)
    vocab = model.vocab
    up, down = vocab.id("surge"), vocab.id("drop")
    keep = [i for i, p in enumerate(batch.prompts) if up in p.token_ids or down in p.token_ids]
    z, _ = instance_normalize(batch.inputs[keep].T)
    swapped = [cli._swap_words(batch.prompts[i], vocab, "surge", "drop") for i in keep]
    orig = [batch.prompts[i] for i in keep]
    mu_a, _, _, _ = inference.generate(model, z.T, orig, horizon)
    mu_b, _, _, _ = inference.generate(model, z.T, swapped, horizon)
    sa, sb = np.sign(np.diff(mu_a, axis=1).mean(axis=1)), np.sign(np.diff(mu_b, axis=1).mean(axis=1))
    return float(np.mean((sa != 0) & (sa == -sb))), len(keep)


def test_c5_context_awareness(criterion, regime_run):
    with criterion(5, "full vs text-removed model, trend flip on word swap") as info:
        t0 = time.perf_counter()
        corpus, vocab, encoder, full = (regime_run[k] for k in ("corpus", "vocab", "encoder", "full"))
        no_text = _fit(corpus, vocab, encoder, ablation="a2")
        full_mse = inference.evaluate(full, corpus, [8], stride=EVAL_STRIDE)["8"]["mse"]
        a2_mse = inference.evaluate(no_text, corpus, [8], stride=EVAL_STRIDE)["8"]["mse"]
        flip, n = _trend_flip_rate(full, corpus)
        seconds = regime_run["seconds"] + time.perf_counter() - t0
        info.update(full_mse=f"{full_mse:.4f}", a2_mse=f"{a2_mse:.4f}", ratio=f"{full_mse / a2_mse:.3f}",
                    flip=f"{flip:.3f} of {n}", seconds=f"{seconds:.0f}")
        assert SPEC.slope >= 2 * SPEC.noise
        assert full_mse <= 0.6 * a2_mse
        assert flip >= 0.9
        assert seconds < 600


def test_c6_calibration_and_point_ablation(criterion):
    with criterion(6, "80% coverage on heteroscedastic data; point model has no sigma head") as info:
        corpus = generate_synthetic(dataclasses.replace(SPEC, heteroscedastic=True))
        vocab = _train_vocab(corpus)
        encoder, _ = trainer.pretrain_encoder(corpus, MODEL, PRETRAIN)
        model = _fit(corpus, vocab, encoder)
        row = inference.evaluate(model, corpus, [8], stride=EVAL_STRIDE)["8"]
        point = CAPTime.build(dataclasses.replace(MODEL, ablation="a4"), vocab, seed=0)
        heads = [k for k in point.params if k.startswith("decoder.head.")]
        widths = {point.params[k].shape[-1] for k in heads}
        batch = inference.eval_windows(corpus, point, "test", 8, stride=EVAL_STRIDE)
        pred = inference.predict_batch(point, batch.inputs[:4], batch.prompts[:4], 8)
        info.update(coverage80=f"{row['coverage80']:.3f}", coverage95=f"{row['coverage95']:.3f}",
                    a4_head_width=sorted(widths))
        assert 0.75 <= row["coverage80"] <= 0.85
        assert widths == {MODEL.patch_len} and pred.sigma is None and not pred.is_probabilistic
        with pytest.raises(ValueError):
            moe.quantile(pred, 0.9)


def test_c7_multi_horizon(criterion, regime_run):
    with criterion(7, "one checkpoint at horizons 8/16/24") as info:
        model, corpus = regime_run["full"], regime_run["corpus"]
        horizons = [MODEL.patch_len * k for k in (1, 2, 3)]
        table = inference.evaluate(model, corpus, horizons, stride=EVAL_STRIDE)
        batch = inference.eval_windows(corpus, model, "test", max(horizons), stride=EVAL_STRIDE)
        for h in horizons:
            pred = inference.predict_batch(model, batch.inputs[:3], batch.prompts[:3], h)
            assert pred.mu.shape == (3, h) and pred.sigma.shape == (3, h)
        mses = [table[str(h)]["mse"] for h in horizons]
        info.update(mse=" <= ".join(f"{v:.4f}" for v in mses), windows=table["8"]["n_windows"])
        assert all(a <= b for a, b in zip(mses, mses[1:]))


def test_c8_metric_oracles(criterion):
    with criterion(8, "metrics vs brute-force loops on 1000 random vectors") as info:
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(1000):
            n, m = int(rng.integers(1, 30)), int(rng.integers(1, 6))
            y, p = rng.normal(size=n) * 10, rng.normal(size=n) * 10
            if rng.random() < 0.1:
                y[0] = p[0] = 0.0
            x = rng.normal(size=n + m + int(rng.integers(1, 20))) * 5
            sm = 200.0 / n * sum(0.0 if abs(a) + abs(b) == 0 else abs(a - b) / (abs(a) + abs(b)) for a, b in zip(y, p))
            num = sum(abs(a - b) for a, b in zip(y, p)) / n
            den = sum(abs(x[t] - x[t - m]) for t in range(m, len(x))) / (len(x) - m)
            ms = num / den
            ref = {
                "mse": sum((a - b) ** 2 for a, b in zip(y, p)) / n,
                "mae": num,
                "smape": sm,
                "mase": ms,
                "owa": 0.5 * (sm / 13.0 + ms / 1.7),
            }
            got = {
                "mse": mt.mse(y, p),
                "mae": mt.mae(y, p),
                "smape": mt.smape(y, p),
                "mase": mt.mase(y, p, x, m),
                "owa": mt.owa(mt.smape(y, p), mt.mase(y, p, x, m), 13.0, 1.7),
            }
            for k in ref:
                worst = max(worst, abs(got[k] - ref[k]) / max(1.0, abs(ref[k])))
        info.update(max_rel_err=f"{worst:.1e}")
        assert worst <= 1e-10


PIPE = """
seed = 7
synth.length = 640
synth.period = 8
synth.segment = 8
model.lookback = 8
model.patch_len = 4
model.d_model = 16
model.n_layers = 1
model.n_heads = 2
model.d_ffn = 32
model.max_positions = 8
model.enc_width = 8
model.enc_blocks = 1
model.n_experts = 2
model.top_k = 1
pretrain.steps = 20
train.steps = 40
train.batch_size = 16
eval.horizons = 4, 8
"""


def _pipeline(root):
    root.mkdir()
    conf = root / "run.conf"
    conf.write_text(PIPE)
    c = ["--config", str(conf)]
    assert cli.main(["synth", *c, "--out", str(root / "data")]) == 0
    assert cli.main(["pretrain-encoder", *c, "--data", str(root / "data"), "--out", str(root / "enc")]) == 0
    conf.write_text(PIPE + f"encoder.path = {root / 'enc' / 'encoder.ckpt'}\n")
    assert cli.main(["train", *c, "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    assert cli.main(["evaluate", *c, "--data", str(root / "data"), "--checkpoint", str(root / "run"),
                     "--horizon", "4", "--horizon", "12", "--out", str(root / "eval")]) == 0
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "run.conf"}


def test_c9_pipeline_determinism(criterion, tmp_path):
    with criterion(9, "two seeded CLI pipelines are bitwise identical") as info:
        a = _pipeline(tmp_path / "one")
        b = _pipeline(tmp_path / "two")
        differ = [k for k in a if a[k] != b.get(k)]
        info.update(files=len(a), differing=len(differ))
        assert set(a) == set(b) and not differ, differ
        assert {"run/model.ckpt", "run/report.json", "eval/report.json", "enc/encoder.ckpt"} <= set(a)
