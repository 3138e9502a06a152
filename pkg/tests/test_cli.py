import json
import logging
import subprocess
import sys
import warnings

import pytest

from cglmha import synthetic
from cglmha import tensor as T
from cglmha import trainer as tr
from cglmha.cli import main

SMALL = ["--epochs", "2"]


@pytest.fixture(autouse=True)
def restore_warning_hooks():
    fmt = warnings.formatwarning
    yield
    logging.captureWarnings(False)
    warnings.formatwarning = fmt


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    paths = synthetic.make_split_files(d, n_train=120, n_test=40, dim=8)
    cfg = tr.RunConfig(embed_dim=8, max_len=8, conv_filters=8, gru_hidden=8, lstm_hidden=4, heads=2,
                       batch_size=16, check_counts=False)
    paths["config"] = d / "config.json"
    paths["config"].write_text(json.dumps(cfg.to_dict()))
    return paths


def run_args(files, out):
    return ["--config", str(files["config"]), "--data-train", str(files["train"]),
            "--data-test", str(files["test"]), "--embeddings", str(files["embeddings"]),
            "--out-dir", str(out)] + SMALL


@pytest.fixture(scope="module")
def trained(files, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["-q", "train"] + run_args(files, out)) == 0
    logging.captureWarnings(False)
    return out


def test_train_outputs(trained):
    for name in ("checkpoint.bin", "vocab.txt", "config.json", "log.jsonl", "log.txt", "test_metrics.json"):
        assert (trained / name).exists()
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["epochs"] == 2 and cfg["embed_dim"] == 8


def test_evaluate_matches_train_metrics(trained, files, capsys):
    assert main(["-q", "evaluate", "--checkpoint", str(trained / "checkpoint.bin"),
                 "--data-test", str(files["test"]), "--json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report == json.loads((trained / "test_metrics.json").read_text())


def test_predict(trained, capsys):
    assert main(["-q", "predict", "--checkpoint", str(trained / "checkpoint.bin"), "some headline", "!!"]) == 0
    lines = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    assert lines[0]["label"] in (0, 1) and abs(sum(lines[0]["probabilities"]) - 1) < 1e-6
    assert lines[1]["label"] is None and "error" in lines[1]


def test_vocab_mismatch_exit_2(trained, files, tmp_path):
    other = tmp_path / "v.txt"
    other.write_text("x\n")
    assert main(["-q", "evaluate", "--checkpoint", str(trained / "checkpoint.bin"),
                 "--data-test", str(files["test"]), "--vocab", str(other)]) == 2


def test_missing_file_exit_2(files, tmp_path):
    args = run_args(files, tmp_path)
    args[args.index("--data-train") + 1] = str(tmp_path / "absent.csv")
    assert main(["-q", "train"] + args) == 2


def test_malformed_data_exit_2(files, tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("headline,label\nfoo,7\n")
    args = run_args(files, tmp_path)
    args[args.index("--data-train") + 1] = str(bad)
    assert main(["-q", "train"] + args) == 2


def test_config_error_exit_1(files, tmp_path):
    assert main(["-q", "train"] + run_args(files, tmp_path) + ["--heads", "3"]) == 1


def test_usage_error_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--epochs", "many"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1


def test_train_without_out_dir(files):
    assert main(["-q", "train", "--data-train", str(files["train"]), "--no-pretrained"]) == 1


def test_ablate(files, tmp_path, capsys):
    assert main(["-q", "ablate"] + run_args(files, tmp_path)) == 0
    out = capsys.readouterr().out
    assert "LSTM+GRU+CNN+MHA(2)+Pre" in out
    rows = [json.loads(x) for x in (tmp_path / "ablation.jsonl").read_text().splitlines()]
    assert len(rows) == 5 and all(r["status"] == "ok" for r in rows)


def test_ablate_baselines(files, tmp_path, capsys):
    assert main(["-q", "ablate", "--baselines"] + run_args(files, tmp_path) + ["--epochs", "1"]) == 0
    rows = [json.loads(x) for x in (tmp_path / "ablation.jsonl").read_text().splitlines()]
    assert [r["name"] for r in rows[5:]] == ["CNN", "GRU"]
    assert rows[5]["status"] == "skipped" and rows[6]["status"] == "ok"


def test_gradcheck_exit_codes(capsys, monkeypatch):
    assert main(["-q", "gradcheck", "--no-cnn"]) == 0
    assert "gradcheck PASS" in capsys.readouterr().out
    axes = (0,)
    monkeypatch.setattr(T, "add_bias", lambda x, b: T.Tensor._op(x.data + b.data, (x, b),
                                                                 lambda g: (g, -g.sum(axis=axes))))
    assert main(["-q", "gradcheck", "--no-cnn"]) == 3
    assert "FAIL (classifier.bias)" in capsys.readouterr().out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "cglmha", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("train", "evaluate", "predict", "ablate", "gradcheck"):
        assert cmd in proc.stdout
