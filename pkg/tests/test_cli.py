import json
import subprocess
import sys

import pytest

from conftest import TINY_CONFIG
from mppa.cli import main


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    (tmp_path / "run.ini").write_text(TINY_CONFIG)
    monkeypatch.chdir(tmp_path)
    return tmp_path


def run(*argv):
    return main([*argv])


def test_datagen_is_byte_identical(workdir):
    assert run("datagen", "--config", "run.ini", "--out", "a.txt", "--seed", "7") == 0
    assert run("datagen", "--config", "run.ini", "--out", "b.txt", "--seed", "7") == 0
    assert (workdir / "a.txt").read_bytes() == (workdir / "b.txt").read_bytes()
    assert (workdir / "a.txt.meta").read_bytes() == (workdir / "b.txt.meta").read_bytes()


def test_full_pipeline(workdir, capsys):
    assert run("datagen", "--config", "run.ini") == 0
    assert run("datagen", "--config", "run.ini", "--split", "val") == 0
    assert run("train", "--config", "run.ini") == 0
    assert (workdir / "out" / "model.ckpt").exists()
    capsys.readouterr()

    assert run("eval", "--config", "run.ini", "--out", "eval.jsonl") == 0
    rec = json.loads((workdir / "eval.jsonl").read_text())
    assert rec["variant"] == "full" and rec["val_perplexity"] > 1

    assert run("eval", "--config", "run.ini", "--disable", "energy", "--disable", "periodicity") == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["disabled"] == ["energy", "periodicity"]

    assert run("ablate", "--config", "run.ini", "--out", "table.tsv") == 0
    assert len((workdir / "table.tsv").read_text().splitlines()) == 5


def test_eval_mismatch_is_a_config_error(workdir, capsys):
    run("datagen", "--config", "run.ini")
    run("datagen", "--config", "run.ini", "--split", "val")
    run("train", "--config", "run.ini")
    (workdir / "other.ini").write_text(TINY_CONFIG.replace("d = 16", "d = 32"))
    assert run("eval", "--config", "other.ini", "--checkpoint", "out/model.ckpt", "--dataset", "data/val.txt") == 2
    assert "d: config=32 checkpoint=16" in capsys.readouterr().err


def test_audit_passes(workdir, capsys):
    assert run("audit", "--config", "run.ini", "--trials", "5", "--length", "24") == 0
    assert capsys.readouterr().out.count("PASS") == 3


def test_audit_failure_reports_seed(workdir, capsys):
    code = run("audit", "--config", "run.ini", "--trials", "3", "--length", "24", "--gating", "sequence_mean", "--seed", "4")
    assert code == 1
    err = capsys.readouterr().err
    assert "offending trial seeds" in err and str(4 * 1_000_003) in err


def test_gradcheck_subcommand(workdir, capsys):
    text = TINY_CONFIG.replace("d = 16", "d = 4").replace("layers = 2", "layers = 1").replace("vocab_size = 64", "vocab_size = 10").replace("C = 8", "C = 2").replace("n_max = 32", "n_max = 8")
    (workdir / "g.ini").write_text(text)
    assert run("gradcheck", "--config", "g.ini", "--length", "6") == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(line.startswith("ok") for line in lines)


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--config", "missing.ini"],
        ["eval", "--config", "run.ini", "--checkpoint", "none.ckpt"],
    ],
)
def test_config_errors_exit_2(workdir, argv):
    assert run(*argv) == 2


def test_bad_config_key_exits_2(workdir, capsys):
    (workdir / "bad.ini").write_text("[model]\nwidth = 4\n")
    assert run("train", "--config", "bad.ini") == 2
    assert "width" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["audit", "--disable", "attention"], ["eval", "--gating", "global"]])
def test_usage_errors_exit_2(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "mppa", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gradcheck" in out.stdout
