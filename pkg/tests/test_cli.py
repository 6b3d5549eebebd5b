import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from latentbnn.cli import main

DIGITS_INI = str(Path(__file__).resolve().parents[1] / "configs" / "digits.ini")
FAST = ["--set", "epochs=1", "--set", "data.train_limit=96", "--set", "data.test_limit=40",
        "--set", "model.stage_widths=8,16", "--set", "model.blocks_per_stage=1"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--config", DIGITS_INI, *FAST, "--out", str(out)]) == 0
    return out


def test_train_writes_outputs_and_override_wins(tmp_path):
    code = main(["train", "--config", DIGITS_INI, *FAST, "--set", "lambda=1e-3", "--out", str(tmp_path)])
    assert code == 0
    text = (tmp_path / "config.ini").read_text()
    assert "lambda = 0.001" in text
    assert (tmp_path / "metrics.csv").exists() and (tmp_path / "checkpoint.bnnf").exists()


def test_out_dir_from_environment(tmp_path, monkeypatch, trained):
    monkeypatch.setenv("LATENTBNN_OUT", str(tmp_path / "env"))
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.bnnf")]) == 0
    assert (tmp_path / "env" / "config.ini").exists()


def test_usage_errors_exit_1(tmp_path, capsys):
    assert main(["train", "--set", "bogus=1", "--out", str(tmp_path)]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["eval"]) == 1
    assert "error" in capsys.readouterr().err


def test_missing_data_exits_2(tmp_path):
    code = main(["train", "--set", "data.kind=mnist", "--set", f"data.path={tmp_path / 'nowhere'}",
                 "--set", "model.input_shape=1,28,28", "--out", str(tmp_path)])
    assert code == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.bnnf"), "--out", str(tmp_path)]) == 2


def test_numerical_abort_exits_3(tmp_path):
    with np.errstate(all="ignore"):
        code = main(["train", "--config", DIGITS_INI, *FAST, "--set", "epochs=2", "--set", "lr0=1e300",
                     "--out", str(tmp_path)])
    assert code == 3


def test_eval_and_recalibrate(tmp_path, trained, capsys):
    ck = str(trained / "checkpoint.bnnf")
    assert main(["eval", "--checkpoint", ck, "--mode", "eval_W_outdated", "--out", str(tmp_path)]) == 0
    assert "eval_W_outdated accuracy" in capsys.readouterr().out
    assert main(["recalibrate", "--checkpoint", ck, "--batches", "2", "--batch-size", "32", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "recalibrated.bnnf").exists()


def test_sweep_lambda_writes_four_rows(tmp_path):
    code = main(["sweep-lambda", "--config", DIGITS_INI, *FAST, "--set", "data.train_limit=48",
                 "--set", "data.test_limit=20", "--out", str(tmp_path)])
    assert code == 0
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == "lambda,acc_B,acc_W,ce,rep" and len(lines) == 5
    assert main(["sweep-lambda", "--lambdas", "a,b", "--out", str(tmp_path)]) == 1


def test_export_packed_then_infer_matches_eval(tmp_path, trained, capsys):
    ck = str(trained / "checkpoint.bnnf")
    assert main(["eval", "--checkpoint", ck, "--out", str(tmp_path)]) == 0
    acc_line = capsys.readouterr().out.strip()
    assert main(["export-packed", "--checkpoint", ck, "--out", str(tmp_path)]) == 0
    assert main(["infer", "--packed", str(tmp_path / "model.bnnp"), "--config", str(trained / "config.ini"),
                 "--out", str(tmp_path)]) == 0
    packed_line = capsys.readouterr().out
    assert acc_line.split()[-1] in packed_line
    preds = (tmp_path / "predictions_test.csv").read_text().splitlines()
    assert preds[0] == "label,prediction" and len(preds) == 41


def test_export_features_and_fre_report(tmp_path, trained):
    ck = str(trained / "checkpoint.bnnf")
    assert main(["export-features", "--checkpoint", ck, "--out", str(tmp_path)]) == 0
    assert len((tmp_path / "features_test.csv").read_text().splitlines()) == 41
    assert main(["fre-report", "--checkpoint", ck, "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "fre_report.csv").read_text().splitlines()
    assert rows[-1].startswith("average")


def test_help_lists_config_keys():
    res = subprocess.run([sys.executable, "-m", "latentbnn.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "lambda =" in res.stdout and "fre-report" in res.stdout
