import csv
import json

import pytest

from dsvm_unet.cli import build_parser, build_train_config, main, read_config

TINY = ["--set", "model.base_dim=8", "--set", "model.encoder_depths=(1,1,1,1)", "--set", "model.decoder_depths=(1,1,1,1)",
        "--set", "model.state_dim=4", "--batch-size", "4", "--epochs", "1"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--n", "8", "--n-val", "4", "--seed", "1", "--out", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    assert main(["train", "--data", str(dataset), "--out", str(out), "--seed", "0"] + TINY) == 0
    return out


def test_help_lists_defaults(capsys):
    for cmd in ("synth", "train", "eval", "predict", "ablate", "complexity"):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args([cmd, "--help"])
        assert exc.value.code == 0
        assert "default" in capsys.readouterr().out


def test_synth_refuses_non_empty_then_force(dataset, tmp_path):
    before = {p.name: p.read_bytes() for p in (dataset / "train" / "images").iterdir()}
    assert len(before) == 8
    assert main(["synth", "--n", "8", "--n-val", "4", "--seed", "1", "--out", str(dataset)]) == 2
    assert main(["synth", "--n", "8", "--n-val", "4", "--seed", "1", "--out", str(dataset), "--force"]) == 0
    assert before == {p.name: p.read_bytes() for p in (dataset / "train" / "images").iterdir()}


def test_synth_multiclass(tmp_path):
    assert main(["synth", "--n", "3", "--classes", "9", "--out", str(tmp_path / "mc")]) == 0
    manifest = json.loads((tmp_path / "mc" / "manifest.json").read_text())
    assert manifest["synth_config"]["num_classes"] == 9


def test_train_outputs(trained):
    for name in ("train_log.csv", "best.pt", "last.pt", "summary.json"):
        assert (trained / name).exists()
    assert not trained.with_name(trained.name + ".partial").exists()


def test_train_twice_same_log(dataset, trained, tmp_path):
    out = tmp_path / "again"
    assert main(["train", "--data", str(dataset), "--out", str(out), "--seed", "0"] + TINY) == 0
    first = (trained / "train_log.csv").read_text().splitlines()[:6]
    assert (out / "train_log.csv").read_text().splitlines()[:6] == first


def test_eval_and_predict(dataset, trained, tmp_path):
    ckpt = str(trained / "best.pt")
    assert main(["eval", "--checkpoint", ckpt, "--data", str(dataset), "--out", str(tmp_path / "ev")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "ev" / "metrics.csv")))
    assert len(rows) == 4 and "hd95" in rows[0]
    assert "summary" in json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert main(["predict", "--checkpoint", ckpt, "--data", str(dataset), "--out", str(tmp_path / "pr")]) == 0
    assert len(list((tmp_path / "pr" / "overlays").glob("*.png"))) == 4
    assert len(list((tmp_path / "pr" / "masks").glob("*.png"))) == 4


def test_missing_checkpoint_is_an_error(dataset, tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.pt"), "--data", str(dataset), "--out", str(tmp_path / "e")]) == 2
    assert "checkpoint not found" in capsys.readouterr().err
    assert not (tmp_path / "e").exists()


def test_config_layering(tmp_path):
    cfg_file = tmp_path / "c.ini"
    cfg_file.write_text("[train]\nepochs = 3\nseed = 4\n[loss]\nbeta = 0.25\n[model]\nbase_dim = 8\n")
    layers = read_config(str(cfg_file))
    cfg = build_train_config(layers)
    assert (cfg.epochs, cfg.seed, cfg.loss.beta, cfg.model.base_dim) == (3, 4, 0.25, 8)
    args = build_parser().parse_args(["train", "--config", str(cfg_file), "--seed", "9", "--set", "loss.alpha=0"])
    from dsvm_unet.cli import _collect

    cfg = build_train_config(_collect(args))
    assert (cfg.epochs, cfg.seed, cfg.loss.alpha, cfg.loss.beta) == (3, 9, 0.0, 0.25)


def test_unknown_config_keys_rejected(tmp_path, dataset, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nepoch = 3\n")
    assert main(["train", "--config", str(bad), "--data", str(dataset), "--out", str(tmp_path / "o")]) == 2
    assert "unknown key" in capsys.readouterr().err
    bad.write_text("[optimiser]\nlr = 3\n")
    assert main(["train", "--config", str(bad), "--data", str(dataset), "--out", str(tmp_path / "o")]) == 2
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path / "o"), "--set", "loss.gamma=1"]) == 2


def test_failed_run_leaves_no_partial_output(tmp_path, dataset):
    out = tmp_path / "fail"
    assert main(["train", "--data", str(dataset), "--out", str(out), "--lr", "1e-9"] + TINY) == 2
    assert not out.exists() and not out.with_name("fail.partial").exists()


def test_ablate(dataset, tmp_path, capsys):
    out = tmp_path / "abl"
    assert main(["ablate", "--data", str(dataset), "--out", str(out), "--seeds", "0"] + TINY) == 0
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    assert len(rows) == 4
    assert list(rows[0]) == ["L_BceDice", "L_Proj", "L_Prog", "mIoU", "DSC", "Acc", "Spe", "Sen", "Avg"]


def test_complexity(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("DSVM_UNET_OUTPUT", str(tmp_path))
    assert main(["complexity", "--preset", "paper-scale"]) == 0
    text = capsys.readouterr().out
    assert "27.43 M" in text and "VM-UNet" in text
    report = json.loads((tmp_path / "complexity" / "complexity.json").read_text())
    assert report["input_size"] == 256 and report["param_count_inference"] > 2e7
