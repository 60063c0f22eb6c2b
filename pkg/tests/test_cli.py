import csv
import hashlib
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from tsdistill.cli import main
from tsdistill.config import tiny_config

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def _sha(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


@pytest.mark.parametrize("command", [[], ["generate"], ["pretrain"], ["embed"], ["probe"], ["finetune"], ["report"]])
def test_help_exits_zero(command, capsys):
    with pytest.raises(SystemExit) as info:
        main(command + ["--help"])
    assert info.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_console_script_module_entry():
    out = subprocess.run([sys.executable, "-m", "tsdistill.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "generate" in out.stdout


def test_generate_size_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "a.utsd", tmp_path / "b.utsd"
    assert main(["--seed", "3", "generate", "--out", str(a), "--samples", "10", "--length", "512", "--max-nodes", "3"]) == 0
    assert main(["generate", "--seed", "3", "--out", str(b), "--samples", "10", "--length", "512", "--max-nodes", "3"]) == 0
    assert os.path.getsize(a) == 4 * 10 * 512 + 16
    assert _sha(a) == _sha(b)
    assert "n=10 T=512" in capsys.readouterr().err


def test_generate_rejects_bad_length(tmp_path, capsys):
    assert main(["generate", "--out", str(tmp_path / "x.utsd"), "--samples", "2", "--length", "100"]) == 2
    assert "multiple of 32" in capsys.readouterr().err
    assert not (tmp_path / "x.utsd").exists()


def test_io_failure_is_nonzero(tmp_path, capsys):
    missing = tmp_path / "nope" / "x.utsd"
    assert main(["generate", "--out", str(missing), "--samples", "2", "--length", "64", "--max-nodes", "2"]) == 1
    assert "error" in capsys.readouterr().err


def test_config_schema_violation_names_field(tmp_path, capsys):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"model": {"depht": 3}}))
    assert main(["--config", str(path), "generate", "--out", str(tmp_path / "x.utsd")]) == 2
    assert "model.depht" in capsys.readouterr().err


def _write_blobs(path, seed):
    rng = np.random.default_rng(seed)
    y = np.repeat(["neg", "pos"], 50)
    x = rng.standard_normal((100, 8)) + 4.0 * (np.repeat([0, 1], 50)[:, None] - 0.5)
    np.savez(path, features=x.astype(np.float32), labels=y)


def test_probe_on_separable_features(tmp_path):
    _write_blobs(tmp_path / "train.npz", 0)
    _write_blobs(tmp_path / "test.npz", 1)
    out = tmp_path / "probe.csv"
    assert main(["probe", "--train", str(tmp_path / "train.npz"), "--test", str(tmp_path / "test.npz"),
                 "--out", str(out), "--dataset", "blobs", "--seeds", "0", "1"]) == 0
    rows = list(csv.DictReader(open(out)))
    assert [r["seed"] for r in rows] == ["0", "1"]
    assert all(float(r["accuracy"]) >= 0.99 and r["regime"] == "linear_probe" for r in rows)


def test_probe_missing_input_is_nonzero(tmp_path):
    assert main(["probe", "--train", str(tmp_path / "a.npz"), "--test", str(tmp_path / "b.npz"),
                 "--out", str(tmp_path / "o.csv")]) != 0


def test_report_matches_hand_aggregation(tmp_path):
    rows = [("d1", 0, "a", 0.9), ("d1", 0, "b", 0.8), ("d2", 0, "a", 0.6), ("d2", 0, "b", 0.7),
            ("d2", 1, "a", 0.8), ("d2", 1, "b", 0.7)]
    for i, chunk in enumerate((rows[:2], rows[2:])):
        with open(tmp_path / f"r{i}.csv", "w") as fh:
            fh.write("dataset,seed,method,regime,accuracy\n")
            fh.writelines(f"{d},{s},{m},linear_probe,{a}\n" for d, s, m, a in chunk)
    out, plot = tmp_path / "report.json", tmp_path / "plot.json"
    assert main(["report", "--results", str(tmp_path / "r0.csv"), str(tmp_path / "r1.csv"),
                 "--out", str(out), "--plot-data", str(plot)]) == 0
    doc = json.load(open(out))
    # d2 means: a 0.7, b 0.7 -> tie
    assert doc["wins"] == {"a": 2, "b": 1}
    assert doc["average_rank"] == {"a": pytest.approx(1.25), "b": pytest.approx(1.75)}
    assert doc["average_accuracy"]["a"] == pytest.approx(0.8)
    assert "config_hash" in doc
    bars = json.load(open(plot))["bars"]
    assert [b["x"] for b in bars] == ["a", "b"] and bars[0]["wins"] == 2


def test_pretrain_embed_finetune_pipeline(tmp_path):
    cfg = tiny_config(model={"d_model": 16, "d_scalar": 4, "n_heads": 2, "head_dim": 4, "mlp_hidden": 32,
                             "head_hidden": 16, "head_bottleneck": 8, "n_prototypes": 32},
                      augment={"n_local": 2},
                      train={"batch_size": 4, "total_steps": 2, "checkpoint_every": 1},
                      eval={"series_len": 64, "finetune_epochs": 1, "probe_epochs": 3})
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(cfg.to_json())
    corpus = tmp_path / "c.utsd"
    assert main(["--config", str(cfg_path), "generate", "--out", str(corpus), "--samples", "8", "--max-nodes", "2"]) == 0
    run = tmp_path / "run"
    assert main(["--config", str(cfg_path), "pretrain", "--corpus", str(corpus), "--out", str(run)]) == 0
    header = open(run / "metrics.csv").readline().strip()
    assert header == "step,lr,wd,ema_m,tau_t,dino,ibot,koleo,total,target_entropy"
    ckpt = run / "checkpoint_0000002.utck"
    assert ckpt.exists()
    uni = os.path.join(FIXTURES, "univariate.ts")
    multi = os.path.join(FIXTURES, "multivariate.ts")
    assert main(["embed", "--checkpoint", str(ckpt), "--data", uni, "--out", str(tmp_path / "f.npz")]) == 0
    assert np.load(tmp_path / "f.npz")["features"].shape == (2, 16)
    assert main(["embed", "--checkpoint", str(ckpt), "--data", multi, "--out", str(tmp_path / "m.npz")]) == 0
    assert np.load(tmp_path / "m.npz")["features"].shape == (3, 48)
    out = tmp_path / "ft.csv"
    assert main(["--config", str(cfg_path), "finetune", "--checkpoint", str(ckpt), "--train", uni, "--test", uni,
                 "--out", str(out), "--seeds", "0"]) == 0
    row = next(csv.DictReader(open(out)))
    assert row["regime"] == "finetune" and row["dataset"] == "univariate"
