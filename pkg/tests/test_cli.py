import json
import subprocess
import sys

import pytest

from grbench import __version__
from grbench.cli import run_command, selftest_report


@pytest.fixture(scope="module")
def prepped(tmp_path_factory):
    out = tmp_path_factory.mktemp("prep") / "toy"
    assert run_command(["prep", "--dataset", "toy", "--seed", "7", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def surrogate(prepped, tmp_path_factory):
    out = tmp_path_factory.mktemp("sur")
    assert run_command(["train", "--data", str(prepped), "--seed", "1", "--epochs", "60", "--out", str(out)]) == 0
    return out


def test_prep_is_byte_deterministic(prepped, tmp_path):
    again = tmp_path / "again"
    assert run_command(["prep", "--dataset", "toy", "--seed", "7", "--out", str(again)]) == 0
    for name in ("splits.json", "config.json", "manifest.json", "bundle/edges.bin", "bundle/features.bin"):
        assert (again / name).read_bytes() == (prepped / name).read_bytes()
    manifest = json.loads((prepped / "manifest.json").read_text())
    assert manifest["version"] == __version__ and manifest["seed"] == 7


def test_train_outputs(surrogate):
    assert (surrogate / "model.grbm").is_file()
    log = (surrogate / "train_log.jsonl").read_text().splitlines()
    assert len(log) >= 1 and "val_acc" in json.loads(log[0])
    assert json.loads((surrogate / "config.json").read_text())["arch"] == "GCN"


def test_train_is_reproducible(prepped, surrogate, tmp_path):
    out = tmp_path / "again"
    assert run_command(["train", "--data", str(prepped), "--seed", "1", "--epochs", "60", "--out", str(out)]) == 0
    assert (out / "model.grbm").read_bytes() == (surrogate / "model.grbm").read_bytes()


def test_attack_and_replay(prepped, surrogate, tmp_path, capsys):
    out = tmp_path / "atk"
    argv = ["attack", "--data", str(prepped), "--surrogate", str(surrogate / "model.grbm"),
            "--method", "fgsm", "--iters", "10", "--seed", "3", "--out", str(out)]
    assert run_command(argv) == 0
    again = tmp_path / "atk2"
    assert run_command(argv[:-1] + [str(again)]) == 0
    assert (out / "attack.bin").read_bytes() == (again / "attack.bin").read_bytes()
    capsys.readouterr()
    assert run_command(["attack", "--data", str(prepped), "--replay", str(out),
                        "--model", str(surrogate / "model.grbm")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert 0.0 <= report["accuracy"] <= 1.0


def test_modification_attack(prepped, surrogate, tmp_path):
    assert run_command(["attack", "--data", str(prepped), "--surrogate", str(surrogate / "model.grbm"),
                        "--scenario", "modification", "--method", "dice", "--out", str(tmp_path / "m")]) == 0


def eval_config(tmp_path, **extra):
    cfg = {
        "dataset": "toy",
        "scenario": "injection",
        "attacks": [{"id": "FGSM", "method": "fgsm", "params": {"iters": 5}}],
        "surrogate": {"arch": "GCN", "max_epochs": 40},
        "defenses": [{"arch": "GCN", "layer_norm": True, "max_epochs": 40}],
        "repeats": 1,
        **extra,
    }
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    return path


def test_eval_one_by_one(tmp_path):
    out = tmp_path / "lb"
    assert run_command(["eval", "--config", str(eval_config(tmp_path)), "--out", str(out)]) == 0
    lb = json.loads((out / "leaderboard.json").read_text())
    assert len(lb["cells"]) == 8
    assert {c["difficulty"] for c in lb["cells"]} == {"E", "M", "H", "F"}
    assert (out / "leaderboard.md").read_text().startswith("### toy")
    # flags win over the file and the effective config is recorded
    assert json.loads((out / "config.json").read_text())["out"] == str(out)


def test_eval_end_to_end_determinism(tmp_path):
    cfg = eval_config(tmp_path, seed=5)
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_command(["eval", "--config", str(cfg), "--out", str(a)]) == 0
    assert run_command(["eval", "--config", str(cfg), "--out", str(b), "--jobs", "2"]) == 0
    assert (a / "leaderboard.json").read_bytes() == (b / "leaderboard.json").read_bytes()


def test_leaderboard_render(tmp_path, capsys):
    out = tmp_path / "lb"
    run_command(["eval", "--config", str(eval_config(tmp_path)), "--out", str(out)])
    capsys.readouterr()
    assert run_command(["leaderboard", "--input", str(out / "leaderboard.json"), "--format", "csv"]) == 0
    assert capsys.readouterr().out.startswith("difficulty,attack,defense")


def test_selftest():
    rep = selftest_report()
    assert len(rep["grad_check"]) == 12
    assert max(rep["grad_check"].values()) < 1e-4
    assert rep["metric_max_error"] < 1e-12
    assert run_command(["selftest"]) == 0


def test_exit_codes(tmp_path, prepped):
    assert run_command(["train"]) == 1
    assert run_command(["nope"]) == 1
    assert run_command(["prep", "--dataset", "no-such-data", "--out", str(tmp_path / "x")]) == 2
    assert run_command(["train", "--data", str(tmp_path), "--out", str(tmp_path / "t")]) == 2
    assert run_command(["attack", "--data", str(prepped)]) == 1
    assert run_command(["leaderboard", "--input", str(tmp_path / "missing.json")]) == 3


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "grbench.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and __version__ in r.stdout
