import json
from pathlib import Path

import pytest

from nca_sensing.cli import main
from nca_sensing.world import load_dataset

TINY_TRAIN = ["--steps", "8", "--hidden", "4", "--width", "8", "--pool", "8", "--batch", "4",
              "--steps-min", "2", "--steps-max", "4"]
SHORT = ["--steps-min", "2", "--steps-max", "4"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen", "--n", 4, "--grid", "6x6", "--seed", 7, "--out", root / "d") == 0
    assert run("train", "--data", root / "d" / "train.csv", "--seed", 1, *TINY_TRAIN, "--out", root / "m") == 0
    assert run("baseline", "--data", root / "d" / "train.csv", "--steps", 5, "--out", root / "b") == 0
    return root


def csv_bytes(directory: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(directory.glob("*.csv"))}


def test_gen_default_shapes(tmp_path):
    assert run("gen", "--shapes", "default", "--n", 100, "--grid", "8x8", "--mode", "binary", "--seed", 7,
               "--out", tmp_path) == 0
    assert len(load_dataset(tmp_path / "dataset.csv")) == 500
    assert len(load_dataset(tmp_path / "train.csv")) == 250
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 7 and manifest["config"]["grid_dims"] == [8, 8]


def test_train_twice_identical_checkpoints(workspace, tmp_path):
    assert run("train", "--data", workspace / "d" / "train.csv", "--seed", 1, *TINY_TRAIN, "--out", tmp_path) == 0
    assert (tmp_path / "model.ckpt").read_bytes() == (workspace / "m" / "model.ckpt").read_bytes()
    assert (tmp_path / "curve.csv").read_bytes() == (workspace / "m" / "curve.csv").read_bytes()


def test_exp_scale_outputs(workspace, tmp_path):
    assert run("exp", "scale", "--ckpt", workspace / "m" / "model.ckpt", "--sizes", "4,8,16", "--samples", 1,
               "--seed", 3, *SHORT, "--out", tmp_path) == 0
    for name in ("scale.csv", "scale_summary.csv", "scale.svg", "manifest.json"):
        assert (tmp_path / name).is_file()
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["checkpoint_sha256"] and manifest["config"]["sizes"] == "4,8,16"


def test_exp_scale_rejects_centralized(workspace, tmp_path):
    assert run("exp", "scale", "--ckpt", workspace / "b" / "model.ckpt", "--out", tmp_path) == 2
    assert "GridSizeError" in json.loads((tmp_path / "manifest.json").read_text())["results"]["error"]


@pytest.mark.parametrize("which", ["fault", "noise"])
def test_sweeps_identical_for_any_jobs(workspace, tmp_path, which):
    outs = []
    for jobs in (1, 2, 1):
        out = tmp_path / f"j{jobs}_{len(outs)}"
        assert run("exp", which, "--ckpt", workspace / "m" / "model.ckpt", "--data", workspace / "d" / "test.csv",
                   "--trials", 4, "--jobs", jobs, *SHORT, "--out", out) == 0
        outs.append(csv_bytes(out))
    assert outs[0] == outs[1] == outs[2]
    assert set(outs[0]) == {f"{which}.csv", f"{which}_summary.csv"}


def test_reruns_byte_identical(workspace, tmp_path):
    cmds = [
        ["gen", "--n", 3, "--grid", "5x5", "--mode", "fractional", "--seed", 2],
        ["eval", "--ckpt", workspace / "m" / "model.ckpt", "--data", workspace / "d" / "test.csv", *SHORT],
        ["baseline", "--data", workspace / "d" / "train.csv", "--steps", 3],
        ["exp", "scale", "--ckpt", workspace / "m" / "model.ckpt", "--sizes", "4,6", "--samples", 1, *SHORT],
    ]
    for i, cmd in enumerate(cmds):
        a, b = tmp_path / f"{i}a", tmp_path / f"{i}b"
        assert run(*cmd, "--out", a) == 0 and run(*cmd, "--jobs", 2, "--out", b) == 0
        assert csv_bytes(a) == csv_bytes(b) and csv_bytes(a)


def test_exp_perf_with_calibration(tmp_path):
    d = tmp_path / "pc"
    assert run("gen", "--n", 2, "--grid", "5x5", "--mode", "pressure", "--calibration", "--seed", 2, "--out", d) == 0
    for name in ("calibration.csv", "train_calibrated.csv", "test_uncalibrated.csv"):
        assert (d / name).is_file()
    out = tmp_path / "p"
    assert run("exp", "perf", "--data", d, "--steps", 2, *SHORT, "--out", out) == 0
    results = json.loads((out / "manifest.json").read_text())["results"]
    assert 0.0 <= results["p"] <= 1.0 and set(results["checkpoints"]) == {"calibrated", "uncalibrated"}


def test_config_file_and_flag_precedence(workspace, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n": 2, "seed": 5, "grid": "4x4"}))
    assert run("gen", "--config", cfg, "--seed", 9, "--out", tmp_path / "o") == 0
    resolved = json.loads((tmp_path / "o" / "manifest.json").read_text())["config"]
    assert resolved["n"] == 2 and resolved["seed"] == 9 and resolved["grid_dims"] == [4, 4]


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("NCA_SENSING_OUT", str(tmp_path / "root"))
    assert run("gen", "--n", 1, "--grid", "4x4") == 0
    assert (tmp_path / "root" / "gen" / "dataset.csv").is_file()


@pytest.mark.parametrize("argv", [
    ["train", "--data", "missing.csv"],
    ["eval", "--ckpt", "missing.ckpt", "--data", "missing.csv"],
    ["gen", "--grid", "8by8"],
    ["gen", "--shapes", "hexagon"],
    ["gen", "--calibration"],
    ["exp", "fault", "--bogus"],
    ["exp", "scale", "--ckpt", "missing.ckpt"],
    ["exp", "perf", "--data", "nowhere"],
    ["frobnicate"],
])
def test_usage_errors_write_nothing(tmp_path, capsys, argv):
    out = tmp_path / "out"
    assert run(*argv, "--out", out) == 1
    assert not out.exists()
    assert "usage error" in capsys.readouterr().err


def test_runtime_failure_exit_code(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    out = tmp_path / "out"
    assert run("train", "--data", empty, "--out", out) == 2
    assert "error" in json.loads((out / "manifest.json").read_text())["results"]
