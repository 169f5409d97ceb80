import json

import pytest

from captime import cli
from captime.config import ConfigError, load_config, parse_lines, section
from captime.model import ModelConfig

TINY = """
seed = 3
synth.length = 480
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
pretrain.steps = 5
train.steps = 15
train.batch_size = 16
eval.horizons = 4, 8
"""


@pytest.fixture
def conf(tmp_path):
    p = tmp_path / "run.conf"
    p.write_text(TINY)
    return p


def test_parse_typed_values():
    cfg = parse_lines(["model.patch_len = 8  # comment", "", "eval.horizons = 8, 16,24",
                       "synth.heteroscedastic = true", "model.ablation = none", "train.lr = 1e-3"])
    assert cfg == {"model.patch_len": 8, "eval.horizons": (8, 16, 24), "synth.heteroscedastic": True,
                   "model.ablation": None, "train.lr": 1e-3}


@pytest.mark.parametrize("line,msg", [
    ("model.nope = 1", "unknown key"),
    ("model.patch_len = eight", "bad value"),
    ("just words", "expected 'key = value'"),
    ("synth.heteroscedastic = maybe", "bad value"),
])
def test_parse_errors_name_the_line(line, msg):
    with pytest.raises(ConfigError, match=f"x.conf:2: {msg}"):
        parse_lines(["seed = 1", line], "x.conf")


def test_load_config_layers(conf):
    cfg = load_config(conf, {"train.steps": 99})
    assert cfg["seed"] == 3 and cfg["train.steps"] == 99 and cfg["eval.split"] == "test"
    mc = section(cfg, "model", ModelConfig)
    assert mc.patch_len == 4 and mc.top_k == 1
    with pytest.raises(ConfigError):
        load_config(conf.parent / "missing.conf")
    with pytest.raises(ConfigError):
        load_config(None, {"bogus": 1})


def test_usage_errors_exit_2(conf, tmp_path, capsys):
    assert cli.main(["train", "--no-such-flag"]) == 2
    assert cli.main(["evaluate", "--config", str(conf), "--out", str(tmp_path / "e")]) == 2
    assert "--checkpoint is required" in capsys.readouterr().err
    assert cli.main(["synth", "--config", str(conf)]) == 2
    assert cli.main(["ablate", "b1", "--config", str(conf), "--out", str(tmp_path / "b")]) == 2
    assert cli.main(["ablate", "zz", "--config", str(conf), "--out", str(tmp_path / "b")]) == 2
    bad = tmp_path / "bad.conf"
    bad.write_text("model.wat = 1\n")
    assert cli.main(["synth", "--config", str(bad), "--out", str(tmp_path / "s")]) == 2
    assert cli.main(["--help"]) == 0


def test_runtime_failure_exits_1(tmp_path, capsys):
    (tmp_path / "series.csv").write_text("timestamp,x\n0,1\n0,2\n")
    rc = cli.main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "r")])
    assert rc == 1
    assert "failed" in capsys.readouterr().err


def test_pipeline_and_two_horizon_evaluation(conf, tmp_path):
    d, r, e = tmp_path / "d", tmp_path / "r", tmp_path / "e"
    assert cli.main(["synth", "--config", str(conf), "--out", str(d)]) == 0
    assert {p.name for p in d.iterdir()} >= {"series.csv", "texts.jsonl", "report.json", "manifest.json"}
    assert cli.main(["train", "--config", str(conf), "--data", str(d), "--out", str(r)]) == 0
    report = json.loads((r / "report.json").read_text())
    assert set(report["horizons"]) == {"4", "8"}
    assert report["metadata"]["config_hash"] == json.loads((r / "manifest.json").read_text())["config_hash"]
    assert cli.main(["evaluate", "--config", str(conf), "--data", str(d), "--checkpoint", str(r),
                     "--horizon", "4", "--horizon", "12", "--out", str(e)]) == 0
    rows = json.loads((e / "report.json").read_text())["horizons"]
    assert set(rows) == {"4", "12"}
    # same horizon set, same windows: the evaluate command reproduces the train report
    assert cli.main(["evaluate", "--config", str(conf), "--data", str(d), "--checkpoint", str(r),
                     "--out", str(tmp_path / "e2")]) == 0
    assert json.loads((tmp_path / "e2" / "report.json").read_text())["horizons"] == report["horizons"]
    f = tmp_path / "f"
    assert cli.main(["forecast", "--config", str(conf), "--data", str(d), "--checkpoint", str(r),
                     "--horizon", "6", "--explain", "--at", "100", "--out", str(f)]) == 0
    fc = json.loads((f / "forecast_6.json").read_text())
    assert len(fc["channels"]["ch1"]["point"]) == 6
    assert (f / "attention_6.csv").exists()
    a = tmp_path / "a"
    assert cli.main(["inspect-attn", "--config", str(conf), "--data", str(d), "--checkpoint", str(r),
                     "--window", "1", "--out", str(a)]) == 0
    paths = json.loads((a / "report.json").read_text())["metadata"]["paths"]
    assert set(paths) == {"text", "no_text", "swapped", "target"}
    assert cli.main(["forecast", "--config", str(conf), "--data", str(d), "--checkpoint", str(r),
                     "--at", "3", "--out", str(f)]) == 2


def test_train_is_deterministic(conf, tmp_path):
    d = tmp_path / "d"
    cli.main(["synth", "--config", str(conf), "--out", str(d)])
    for name in ("r1", "r2"):
        assert cli.main(["train", "--config", str(conf), "--data", str(d), "--out", str(tmp_path / name)]) == 0
    for f in ("model.ckpt", "report.json", "manifest.json", "metrics.csv"):
        assert (tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes(), f


def test_ablate_writes_both_runs(conf, tmp_path):
    d, out = tmp_path / "d", tmp_path / "ab"
    cli.main(["synth", "--config", str(conf), "--out", str(d)])
    assert cli.main(["ablate", "a2", "--config", str(conf), "--data", str(d), "--out", str(out)]) == 0
    row = json.loads((out / "report.json").read_text())["horizons"]["4"]
    assert {"full_mse", "a2_mse", "mse_ratio_full_over_variant"} <= set(row)
    assert (out / "full" / "model.ckpt").exists() and (out / "a2" / "model.ckpt").exists()


def test_gradcheck_command(tmp_path, capsys):
    assert cli.main(["gradcheck", "--out", str(tmp_path)]) == 0
    assert "gradcheck PASS" in capsys.readouterr().out
    meta = json.loads((tmp_path / "report.json").read_text())["metadata"]
    assert meta["passed"] and meta["max_rel_err"] < 1e-3
