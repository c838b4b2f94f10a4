import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from karma.cli import main
from karma.config import load_config, parse_override
from karma.model import ConfigError

SMALL = {
    "data": {"n_tiles": 6, "height": 8, "width": 8, "bands": 4, "endmembers": 3},
    "model": {"image_size": 8, "patch_size": 2, "bands": 4, "embed_dim": 16, "heads": 2, "encoder_depth": 1,
              "decoder_depth": 1, "endmember_count": 3},
    "train": {"epochs": 2, "batch_size": 4},
    "downstream": {"epochs": 2},
}


@pytest.fixture
def small(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


# -- config --------------------------------------------------------------------------

def test_override_parsing():
    assert parse_override("loss.lambda2=0") == (["loss", "lambda2"], 0)
    assert parse_override("dataset=some/dir") == (["dataset"], "some/dir")
    assert parse_override("sweep.m_list=[2,4]") == (["sweep", "m_list"], [2, 4])
    with pytest.raises(ConfigError):
        parse_override("novalue")


def test_unknown_key_reports_path(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"epocs": 3}}))
    with pytest.raises(ConfigError, match="train.epocs"):
        load_config(bad)


def test_baseline_overrides():
    cfg = load_config(None, ["loss.lambda2=0", "loss.lambda3=0"])
    assert (cfg.loss.lambda1, cfg.loss.lambda2, cfg.loss.lambda3) == (1.0, 0.0, 0.0)


def test_invalid_value_is_config_error():
    with pytest.raises(ConfigError):
        load_config(None, ["model.patch_size=5"])


# -- commands --------------------------------------------------------------------------

def test_generate_is_reproducible(small, tmp_path):
    assert run("generate", "--config", small, "--override", "data.n_tiles=4", "--out", tmp_path / "a") == 0
    assert run("generate", "--config", small, "--override", "data.n_tiles=4", "--out", tmp_path / "b") == 0
    manifest = json.loads((tmp_path / "a/manifest.json").read_text())
    assert len(manifest["tiles"]) == 4
    for entry in manifest["tiles"]:
        assert (tmp_path / "a" / entry["cube"]).read_bytes()[:4] == b"HSC1"
    for f in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_unknown_key_exit_code(small, tmp_path, capsys):
    assert run("generate", "--config", small, "--override", "data.bogus=1", "--out", tmp_path) == 2
    assert "data.bogus" in capsys.readouterr().err


def test_bad_usage_exit_code(capsys):
    assert run("frobnicate") == 2
    assert run("evaluate") == 2


def test_pretrain_evaluate_pipeline(small, tmp_path):
    ds, out = tmp_path / "ds", tmp_path / "run"
    assert run("generate", "--config", small, "--out", ds) == 0
    assert run("pretrain", "--config", small, "--override", f"dataset={ds}", "--out", out) == 0
    assert (out / "final.kckp").exists()
    lines = (out / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 2 * 2 and all("lr" in json.loads(s) for s in lines)

    ev = tmp_path / "ev"
    assert run("evaluate", "--config", small, "--override", f"dataset={ds}", "--checkpoint", out / "final.kckp",
               "--out", ev) == 0
    rep = json.loads((ev / "report.json").read_text())
    assert np.isfinite(rep["avg_psnr"]) and 0 < rep["avg_ssim"] <= 1

    ev0 = tmp_path / "ev0"
    assert run("evaluate", "--config", small, "--override", f"dataset={ds}", "--override", "eval.mask_ratio=0",
               "--checkpoint", out / "final.kckp", "--out", ev0) == 0
    assert json.loads((ev0 / "report.json").read_text())["avg_psnr"] == 99.0


def test_evaluate_comparison(small, tmp_path):
    a, b = tmp_path / "karma", tmp_path / "base"
    assert run("pretrain", "--config", small, "--out", a) == 0
    assert run("pretrain", "--config", small, "--override", "loss.lambda2=0", "--override", "loss.lambda3=0",
               "--out", b) == 0
    ev = tmp_path / "cmp"
    assert run("evaluate", "--config", small, "--checkpoint", a / "final.kckp", "--compare", b / "final.kckp",
               "--out", ev) == 0
    cmp = json.loads((ev / "comparison.json").read_text())
    assert cmp["delta"]["avg_psnr"] == pytest.approx(cmp["candidate"]["avg_psnr"] - cmp["reference"]["avg_psnr"])


def test_pretrain_same_seed_same_checkpoint(small, tmp_path):
    assert run("pretrain", "--config", small, "--seed", 3, "--out", tmp_path / "a") == 0
    assert run("pretrain", "--config", small, "--seed", 3, "--out", tmp_path / "b") == 0
    assert (tmp_path / "a/final.kckp").read_bytes() == (tmp_path / "b/final.kckp").read_bytes()


def test_divergent_pretrain_exit_code(small, tmp_path):
    out = tmp_path / "nan"
    code = run("pretrain", "--config", small, "--override", "train.base_lr=1e6", "--override", "train.epochs=100",
               "--out", out)
    assert code == 1
    last = json.loads((out / "train_log.jsonl").read_text().splitlines()[-1])
    assert last["event"] == "abort"


def test_unmix(small, tmp_path):
    assert run("pretrain", "--config", small, "--out", tmp_path / "run") == 0
    assert run("unmix", "--config", small, "--checkpoint", tmp_path / "run/final.kckp", "--out", tmp_path / "u") == 0
    rep = json.loads((tmp_path / "u/unmix.json").read_text())
    assert rep["alignment"] is not None and 0 <= rep["alignment"]["mean_sam"] <= np.pi
    abund = np.load(tmp_path / "u/abundances.npy")
    assert np.max(np.abs(abund.sum(-1) - 1)) <= 1e-6


def test_unmix_mismatched_m_skips_alignment(small, tmp_path):
    assert run("pretrain", "--config", small, "--override", "model.endmember_count=2", "--out", tmp_path / "run") == 0
    with pytest.warns(UserWarning, match="alignment skipped"):
        code = run("unmix", "--config", small, "--checkpoint", tmp_path / "run/final.kckp", "--out", tmp_path / "u")
    assert code == 0
    rep = json.loads((tmp_path / "u/unmix.json").read_text())
    assert rep["alignment"] is None and "fcls_learned_mean_residual" in rep


def test_sweep_m(small, tmp_path):
    assert run("sweep-m", "--config", small, "--m-list", "2,3", "--out", tmp_path / "sw") == 0
    with open(tmp_path / "sw/sweep_m.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["M", "avg_psnr", "avg_ssim", "phys_loss"]
    assert [r[0] for r in rows[1:]] == ["2", "3"]
    # a single-M sweep reproduces the plain pretrain + evaluate numbers
    assert run("pretrain", "--config", small, "--out", tmp_path / "p") == 0
    assert run("evaluate", "--config", small, "--checkpoint", tmp_path / "p/final.kckp", "--out", tmp_path / "e") == 0
    rep = json.loads((tmp_path / "e/report.json").read_text())
    assert float(rows[2][1]) == rep["avg_psnr"]


def test_downstream(small, tmp_path):
    assert run("pretrain", "--config", small, "--out", tmp_path / "run") == 0
    assert run("downstream", "--config", small, "--checkpoint", tmp_path / "run/final.kckp",
               "--out", tmp_path / "d") == 0
    rep = json.loads((tmp_path / "d/downstream.json").read_text())
    assert rep["encoder_checksum_before"] == rep["encoder_checksum_after"]
    assert "overall_top1" in rep["macro"]
    assert run("downstream", "--config", small, "--out", tmp_path / "d2") == 2


def test_gradcheck_and_fault(tmp_path, capsys):
    assert run("gradcheck", "--out", tmp_path / "g") == 0
    report = json.loads((tmp_path / "g/gradcheck.json").read_text())
    assert report["passed"] and report["max_error"] < 1e-4
    assert set(report["errors"]) >= {"matmul", "softmax", "arccos", "objective"}
    capsys.readouterr()
    assert run("gradcheck", "--corrupt", "gelu", "--out", tmp_path / "h") == 1
    assert "gelu" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    env = {**os.environ, "KARMA_LOG_LEVEL": "error"}
    proc = subprocess.run([sys.executable, "-m", "karma.cli", "generate", "--override", "data.n_tiles=1",
                           "--override", "data.height=8", "--override", "data.width=8", "--out", str(tmp_path)],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "manifest.json").exists()


def test_bad_log_level(monkeypatch):
    monkeypatch.setenv("KARMA_LOG_LEVEL", "loud")
    assert run("gradcheck") == 2
