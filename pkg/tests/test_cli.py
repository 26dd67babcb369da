import os
import subprocess
import sys

import pytest

from loancast import cli
from loancast.datacube import read_archive
from loancast.model import read_checkpoint, tiny_config
from loancast.trainer import TrainConfig

TINY_DIMS = "2,2,3,5,5"


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def cubes(tmp_path_factory):
    root = tmp_path_factory.mktemp("cubes")
    train, val = str(root / "train.fcub"), str(root / "val.fcub")
    assert cli.main(["synth", "--seed", "3", "--pos", "8", "--neg", "8", "--dims", TINY_DIMS, "--out", train]) == 0
    assert cli.main(["synth", "--seed", "4", "--pos", "4", "--neg", "4", "--dims", TINY_DIMS, "--out", val]) == 0
    return train, val


def tiny_run_config(path, **train):
    text = cli.RunConfig(model=tiny_config(), train=TrainConfig(**{"epochs": 2, "batch_size": 8, **train})).dumps()
    path.write_text(text)
    return str(path)


@pytest.fixture(scope="module")
def overfit(tmp_path_factory, cubes):
    root = tmp_path_factory.mktemp("overfit")
    cfg = tiny_run_config(root / "run.ini", epochs=120, batch_size=4, lr=3e-3)
    out_dir = str(root / "run")
    assert cli.main(["train", "--config", cfg, "--train", cubes[0], "--out-dir", out_dir]) == 0
    return out_dir


# ------------------------------------------------------------------ synth

def test_synth_is_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a.fcub", tmp_path / "b.fcub"
    for path in (a, b):
        code, out, _ = run(capsys, "synth", "--seed", "7", "--pos", "5", "--neg", "20", "--dims", TINY_DIMS,
                           "--out", str(path))
        assert code == 0
    assert out.startswith("25 samples (5 positive, 20 negative)")
    assert a.read_bytes() == b.read_bytes()
    assert len(read_archive(a)) == 25


def test_synth_without_positives(tmp_path, capsys):
    path = tmp_path / "neg.fcub"
    assert run(capsys, "synth", "--pos", "0", "--neg", "6", "--dims", TINY_DIMS, "--out", str(path))[0] == 0
    assert not read_archive(path).labels.any()


def test_synth_seed_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "7")
    run(capsys, "synth", "--pos", "2", "--neg", "2", "--dims", TINY_DIMS, "--out", str(tmp_path / "env.fcub"))
    monkeypatch.delenv(cli.SEED_ENV)
    run(capsys, "synth", "--seed", "7", "--pos", "2", "--neg", "2", "--dims", TINY_DIMS, "--out", str(tmp_path / "flag.fcub"))
    assert (tmp_path / "env.fcub").read_bytes() == (tmp_path / "flag.fcub").read_bytes()


def test_synth_unwritable_path(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _, err = run(capsys, "synth", "--pos", "1", "--neg", "1", "--dims", TINY_DIMS, "--out", str(blocker / "a.fcub"))
    assert code == 2 and "cannot write" in err


# ------------------------------------------------------------------ train

def test_train_writes_run_directory(tmp_path, capsys, cubes):
    cfg = tiny_run_config(tmp_path / "run.ini")
    out_dir = tmp_path / "run"
    code, out, _ = run(capsys, "train", "--config", cfg, "--train", cubes[0], "--val", cubes[1], "--out-dir", str(out_dir))
    assert code == 0
    for name in ("best.ckpt", "last.ckpt", "train.log", "config.ini"):
        assert (out_dir / name).exists()
    assert "best validation F1" in out
    ckpt = read_checkpoint(out_dir / "last.ckpt")
    assert ckpt.cfg == tiny_config() and "norm" in ckpt.sections


def test_echoed_config_reproduces_run(tmp_path, capsys, cubes):
    cfg = tiny_run_config(tmp_path / "run.ini")
    out_dir = tmp_path / "run"
    run(capsys, "train", "--config", cfg, "--train", cubes[0], "--out-dir", str(out_dir), "--seed", "5")
    first = (out_dir / "train.log").read_text()
    last = (out_dir / "last.ckpt").read_bytes()
    code, _, err = run(capsys, "train", "--config", str(out_dir / "config.ini"))
    assert code == 2 and "--force" in err
    (out_dir / "train.log").unlink()
    assert run(capsys, "train", "--config", str(out_dir / "config.ini"), "--force")[0] == 0
    assert (out_dir / "train.log").read_text() == first
    assert (out_dir / "last.ckpt").read_bytes() == last


@pytest.mark.parametrize("flags,check", [
    (("--loan", "off", "--te", "off"), lambda c: c.loan_blocks == () and not c.te),
    (("--arch", "one-branch-3d", "--loan", "off"), lambda c: c.arch == "one-branch-3d"),
    (("--loan", "1,2,3"), lambda c: c.loan_blocks == (1, 2, 3)),
    (("--loan-variant", "variable"), lambda c: c.loan_variant == "variable"),
])
def test_train_config_routing(tmp_path, capsys, cubes, flags, check):
    cfg = tiny_run_config(tmp_path / "run.ini")
    out_dir = tmp_path / "run"
    assert run(capsys, "train", "--config", cfg, "--train", cubes[0], "--out-dir", str(out_dir), *flags)[0] == 0
    assert check(read_checkpoint(out_dir / "last.ckpt").cfg)


def test_config_error_names_line(tmp_path, capsys, cubes):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nepochs = 2\nlearning_rate = 0.1\n")
    code, _, err = run(capsys, "train", "--config", str(bad), "--train", cubes[0], "--out-dir", str(tmp_path / "r"))
    assert code == 2 and "line 3" in err
    bad.write_text("[train]\nepochs = two\n")
    code, _, err = run(capsys, "train", "--config", str(bad), "--train", cubes[0], "--out-dir", str(tmp_path / "r"))
    assert code == 2 and "line 2" in err
    bad.write_text("[optimizer]\nlr = 1\n")
    assert run(capsys, "train", "--config", str(bad))[0] == 2
    code, _, err = run(capsys, "train", "--train", cubes[0], "--out-dir", str(tmp_path / "r"), "--set", "model.colour=red")
    assert code == 2


def test_config_accepts_inline_comments():
    run, _ = cli.parse_run_config("# run\n[model]\nloan_blocks = 1, 3   # first and last\nte = off\n")
    assert run.model.loan_blocks == (1, 3) and not run.model.te


def test_dimension_mismatch_exits_3(tmp_path, capsys, cubes):
    # default config expects 10x15x10x25x25 cubes
    code, _, err = run(capsys, "train", "--train", cubes[0], "--out-dir", str(tmp_path / "r"))
    assert code == 3 and "do not match" in err
    code, _, _ = run(capsys, "train", "--train", str(tmp_path / "missing.fcub"), "--out-dir", str(tmp_path / "r"))
    assert code == 3


# ------------------------------------------------------------------ eval / predict

def test_eval_after_overfit(tmp_path, capsys, cubes, overfit):
    out = tmp_path / "report.tsv"
    code, text, _ = run(capsys, "eval", "--checkpoint", os.path.join(overfit, "best.ckpt"), "--cube", cubes[0],
                        "--out", str(out))
    assert code == 0
    header, values = out.read_text().splitlines()
    assert header.split("\t") == ["TP", "FP", "TN", "FN", "Precision", "Recall", "F1", "AUROC", "OA"]
    assert float(values.split("\t")[8]) >= 95.0
    assert "RecallPos=" in text
    kv = (tmp_path / "report.tsv.kv").read_text()
    assert "Threshold=0.5" in kv


def test_eval_threshold_sweep(tmp_path, capsys, cubes, overfit):
    ckpt = os.path.join(overfit, "last.ckpt")
    precision = {}
    for t in ("0.5", "0.9"):
        out = tmp_path / f"r{t}.tsv"
        assert run(capsys, "eval", "--checkpoint", ckpt, "--cube", cubes[0], "--threshold", t, "--out", str(out))[0] == 0
        row = dict(zip(*[line.split("\t") for line in out.read_text().splitlines()]))
        precision[t] = (float(row["Precision"]), int(row["TP"]) + int(row["FP"]))
    # the property is only defined when both thresholds predict a positive
    assert precision["0.5"][1] and precision["0.9"][1]
    assert precision["0.9"][0] >= precision["0.5"][0]


def test_eval_default_report_location(tmp_path, capsys, cubes, overfit):
    ckpt = tmp_path / "copy.ckpt"
    ckpt.write_bytes(open(os.path.join(overfit, "last.ckpt"), "rb").read())
    assert run(capsys, "eval", "--checkpoint", str(ckpt), "--cube", cubes[0])[0] == 0
    assert (tmp_path / "copy.eval.tsv").exists()


def test_eval_errors(tmp_path, capsys, cubes, overfit):
    big = tmp_path / "big.fcub"
    run(capsys, "synth", "--pos", "1", "--neg", "1", "--out", str(big))
    assert run(capsys, "eval", "--checkpoint", os.path.join(overfit, "last.ckpt"), "--cube", str(big))[0] == 3
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"nonsense")
    code, _, err = run(capsys, "eval", "--checkpoint", str(junk), "--cube", cubes[0])
    assert code == 3 and "magic" in err


def test_predict_format(tmp_path, capsys, cubes, overfit):
    out = tmp_path / "scores.csv"
    code, _, _ = run(capsys, "predict", "--checkpoint", os.path.join(overfit, "last.ckpt"), "--cube", cubes[1],
                     "--out", str(out), "--threshold", "0.3")
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "index,score,label" and len(lines) == 9
    for i, line in enumerate(lines[1:]):
        idx, score, label = line.split(",")
        assert int(idx) == i and 0.0 <= float(score) <= 1.0
        assert int(label) == int(float(score) >= 0.3)


# ------------------------------------------------------------------ params / misc

def test_params_report(capsys):
    code, out, _ = run(capsys, "params")
    assert code == 0
    assert "total               442,482" in out
    assert "in [250,000, 500,000]: yes" in out
    assert "TE off: 442,226 (delta +256)" in out
    assert "LOAN layers 23,136" in out
    assert "one-branch 3D" in out


def test_params_for_ablations(capsys):
    totals = set()
    for loan in ("1", "1,2", "1,2,3"):
        out = run(capsys, "params", "--loan", loan)[1]
        totals.add(next(l for l in out.splitlines() if l.startswith("total")))
    assert len(totals) == 3
    assert "TE on: 442,482 (delta -256)" in run(capsys, "params", "--te", "off")[1]


@pytest.mark.parametrize("command", ["synth", "train", "eval", "predict", "gradcheck", "params"])
def test_help_exists(capsys, command):
    with pytest.raises(SystemExit) as exc:
        cli.main([command, "--help"])
    assert exc.value.code == 0
    assert "usage: loancast" in capsys.readouterr().out


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "loancast", "params", "--te", "off"], capture_output=True, text=True)
    assert proc.returncode == 0 and "442,226" in proc.stdout


def test_gradcheck_passes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--size", "tiny")
    assert code == 0 and "FAIL" not in out
    assert run(capsys, "gradcheck", "--size", "large")[0] == 2
