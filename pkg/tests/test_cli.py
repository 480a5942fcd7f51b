import json
import numpy as np
import pytest

from octnet.cli import EXIT_OK, EXIT_REPRO, EXIT_RUNTIME, EXIT_USAGE, run
from octnet.training import load_checkpoint


@pytest.fixture(scope="module")
def trained(tmp_path_factory, fixture_root):
    out = tmp_path_factory.mktemp("run")
    code = run(["train", "--arch", "vanilla_cnn", "--data", str(fixture_root), "--epochs", "1",
                "--seed", "7", "--width", "0.25", "--out", str(out / "a")])
    assert code == EXIT_OK
    return out


def test_reproduce_metrics_exit_zero(capsys):
    assert run(["reproduce-metrics"]) == EXIT_OK
    text = capsys.readouterr().out
    passes = [l for l in text.splitlines() if l.startswith("PASS")]
    assert len(passes) == 4
    for ref in ("reference=0.9800", "reference=0.9907", "reference=0.9700", "reference=0.9917"):
        assert any(ref in l for l in passes)
    assert sum(l.startswith("NOTE") for l in text.splitlines()) == 4
    assert "FAIL" not in text


def test_reproduce_metrics_tight_tolerance_fails(capsys):
    # 0.98347 vs 0.98 differs by 0.00347
    assert run(["reproduce-metrics", "--tolerance", "0.001"]) == EXIT_REPRO
    assert "FAIL vanilla_cnn" in capsys.readouterr().out


def test_reproduce_metrics_json(capsys):
    assert run(["reproduce-metrics", "--json"]) == EXIT_OK
    rows = json.loads(capsys.readouterr().out)
    assert len(rows) == 8 and {r["status"] for r in rows} == {"PASS", "NOTE"}


def test_train_twice_identical_curves(trained, fixture_root):
    code = run(["train", "--arch", "vanilla_cnn", "--data", str(fixture_root), "--epochs", "1",
                "--seed", "7", "--width", "0.25", "--out", str(trained / "b")])
    assert code == EXIT_OK
    a = (trained / "a" / "curves.csv").read_bytes()
    assert a == (trained / "b" / "curves.csv").read_bytes()
    assert a.decode().splitlines()[0] == "epoch,train_acc,train_loss,val_acc,val_loss"
    # headers differ only in the recorded output paths
    pa = load_checkpoint(trained / "a" / "model.octm").net.named_parameters()
    pb = load_checkpoint(trained / "b" / "model.octm").net.named_parameters()
    assert all(p.tobytes() == q.tobytes() for (_, p), (_, q) in zip(pa, pb))


def test_train_refuses_overwrite(trained, fixture_root, capsys):
    ckpt = trained / "a" / "model.octm"
    before = ckpt.read_bytes()
    code = run(["train", "--arch", "vanilla_cnn", "--data", str(fixture_root), "--epochs", "1",
                "--seed", "8", "--width", "0.25", "--out", str(trained / "a")])
    assert code == EXIT_USAGE
    assert "--force" in capsys.readouterr().err
    assert ckpt.read_bytes() == before


def test_train_config_file_and_flag_precedence(tmp_path, fixture_root):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"arch": "vanilla_cnn", "epochs": 5, "width": 0.25, "seed": 1}))
    out = tmp_path / "o"
    assert run(["train", "--config", str(cfg), "--data", str(fixture_root), "--epochs", "1",
                "--out", str(out), "--no-augment"]) == EXIT_OK
    assert len((out / "curves.csv").read_text().splitlines()) == 2


def test_predict_probabilities_sum_to_one(trained, manifest, capsys):
    image = manifest.splits["test"]["DME"][0]
    assert run(["predict", "--checkpoint", str(trained / "a" / "model.octm"), "--image", image, "--json"]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    probs = np.array(list(out["probabilities"].values()))
    assert list(out["probabilities"]) == ["CNV", "DME", "DRUSEN", "NORMAL"]
    assert abs(probs.sum() - 1) < 1e-5 and out["label"] in out["probabilities"]


def test_eval_prints_report(trained, fixture_root, tmp_path, capsys):
    rep = tmp_path / "r.json"
    assert run(["eval", "--checkpoint", str(trained / "a" / "model.octm"), "--data", str(fixture_root),
                "--out", str(rep)]) == EXIT_OK
    assert "overall accuracy" in capsys.readouterr().out
    data = json.loads(rep.read_text())
    assert data["total"] == 8 and np.array(data["confusion_matrix"]).sum() == 8


def test_synth_command(tmp_path):
    assert run(["synth", "--out", str(tmp_path / "s"), "--per-class", "2", "--size", "16", "--seed", "1"]) == EXIT_OK
    assert len(list((tmp_path / "s").rglob("*.png"))) == 4 * (2 + 1 + 1)


@pytest.mark.parametrize("argv", [
    [],
    ["bogus"],
    ["train", "--arch", "alexnet", "--data", "x", "--seed", "1", "--out", "y"],
    ["train", "--arch", "vanilla_cnn", "--data", "x", "--out", "y"],
    ["reproduce-metrics", "--frobnicate"],
    ["eval", "--checkpoint", "c"],
])
def test_usage_errors_exit_one_without_output(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert run(argv) == EXIT_USAGE
    assert capsys.readouterr().err
    assert list(tmp_path.iterdir()) == []


def test_missing_usage_never_writes_out_dir(tmp_path, capsys):
    out = tmp_path / "never"
    assert run(["train", "--arch", "vanilla_cnn", "--data", str(tmp_path), "--out", str(out)]) == EXIT_USAGE
    assert not out.exists()


def test_runtime_errors_exit_two(tmp_path, capsys):
    (tmp_path / "bad.octm").write_bytes(b"OCTM")
    assert run(["predict", "--checkpoint", str(tmp_path / "bad.octm"), "--image", "x.png"]) == EXIT_RUNTIME
    assert run(["train", "--arch", "vanilla_cnn", "--data", str(tmp_path / "none"), "--seed", "0",
                "--out", str(tmp_path / "o")]) == EXIT_RUNTIME
    assert "missing split" in capsys.readouterr().err
