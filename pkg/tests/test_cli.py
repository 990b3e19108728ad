"""Command-line interface: config layering, exit codes and a tiny end-to-end run."""
from __future__ import annotations

import json

import pytest

from pushgrasp import cli


def run(*argv):
    return cli.main(list(argv))


def test_help_and_usage_errors(capsys):
    assert run("--help") == cli.EXIT_OK
    assert run("eval", "--help") == cli.EXIT_OK
    assert run() == cli.EXIT_CONFIG
    assert run("fly") == cli.EXIT_CONFIG
    assert run("gen-data", "--scenes", "many") == cli.EXIT_CONFIG
    assert run("gen-data") == cli.EXIT_CONFIG
    assert "missing required option(s): --out" in capsys.readouterr().err


def test_config_layering(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 3, "epochs": 7, "train-grasp": {"epochs": 2, "lr": 0.1}}))
    args = cli.build_parser().parse_args(["--config", str(cfg), "train-grasp", "--data", "d", "--out", "o", "--lr", "0.2"])
    v = cli.resolve(args)
    assert (v["seed"], v["epochs"], v["lr"], v["data"]) == (3, 2, 0.2, "d")


@pytest.mark.parametrize("content", ["{oops", "[1, 2]", json.dumps({"sed": 1}), json.dumps({"epochs": "ten"})])
def test_bad_config_files(tmp_path, content):
    cfg = tmp_path / "c.json"
    cfg.write_text(content)
    assert run("--config", str(cfg), "train-grasp", "--data", "d", "--out", "o") == cli.EXIT_CONFIG


def test_missing_config_file(tmp_path):
    assert run("--config", str(tmp_path / "none.json"), "eval") == cli.EXIT_CONFIG


def test_data_errors(tmp_path):
    assert run("train-grasp", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "g.ckpt")) == cli.EXIT_DATA
    assert run("train-push", "--grasp-ckpt", str(tmp_path / "g"), "--critic-ckpt", str(tmp_path / "c"),
               "--out", str(tmp_path)) == cli.EXIT_DATA
    assert run("eval", "--ckpt-dir", str(tmp_path), "--report", str(tmp_path / "r")) == cli.EXIT_DATA
    assert run("render", "--episode", str(tmp_path / "e.jsonl"), "--out-dir", str(tmp_path)) == cli.EXIT_DATA


def test_value_errors(tmp_path):
    assert run("gen-data", "--objects-min", "4", "--objects-max", "2", "--out", str(tmp_path)) == cli.EXIT_CONFIG
    assert run("eval", "--ckpt-dir", str(tmp_path), "--report", "r", "--task", "dance") == cli.EXIT_CONFIG
    assert run("eval", "--ckpt-dir", str(tmp_path), "--report", "r", "--seeds", "a,b") == cli.EXIT_CONFIG


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--scenes", "2", "--objects-min", "2", "--objects-max", "2", "--grasps-per-mask", "4",
               "--grid", "16", "--out", str(root / "data")) == cli.EXIT_OK
    return root


def test_divergence_exit_code(tiny_data):
    assert run("train-grasp", "--data", str(tiny_data / "data"), "--epochs", "5", "--lr", "1000",
               "--out", str(tiny_data / "bad.ckpt")) == cli.EXIT_DIVERGED


def test_end_to_end(tiny_data, capsys):
    root = tiny_data
    d = str(root / "data")
    assert run("train-grasp", "--data", d, "--epochs", "1", "--out", str(root / "g.ckpt")) == cli.EXIT_OK
    assert (root / "g.csv").is_file()
    assert run("train-critic", "--data", d, "--epochs", "1", "--out", str(root / "c.ckpt")) == cli.EXIT_OK
    assert run("train-push", "--grasp-ckpt", str(root / "g.ckpt"), "--critic-ckpt", str(root / "c.ckpt"),
               "--steps", "3", "--out", str(root / "ck")) == cli.EXIT_OK
    for name in ("grasp.ckpt", "critic.ckpt", "push.ckpt", "push_rewards.csv", "transitions.jsonl"):
        assert (root / "ck" / name).is_file()
    assert run("eval", "--task", "constrained", "--ckpt-dir", str(root / "ck"), "--seeds", "0", "--iterations", "1",
               "--push-budget", "1", "--report", str(root / "rep"), "--episodes-dir", str(root / "eps")) == cli.EXIT_OK
    assert "GSR" in capsys.readouterr().out
    for suffix in (".csv", ".txt", ".episodes.jsonl"):
        assert (root / f"rep{suffix}").is_file()
    episodes = sorted((root / "eps").glob("*.jsonl"))
    assert len(episodes) == 8
    assert run("render", "--episode", str(episodes[0]), "--out-dir", str(root / "frames"), "--grid", "16") == cli.EXIT_OK
    assert list((root / "frames").glob("frame_*.ppm"))


def test_outputs_into_new_and_shared_directories(tiny_data):
    d, ck = str(tiny_data / "data"), tiny_data / "nested" / "ck"
    assert run("train-grasp", "--data", d, "--epochs", "1", "--out", str(ck / "grasp.ckpt")) == cli.EXIT_OK
    assert run("train-critic", "--data", d, "--epochs", "1", "--out", str(ck / "critic.ckpt")) == cli.EXIT_OK
    # --out may be the directory the input checkpoints already live in
    assert run("train-push", "--grasp-ckpt", str(ck / "grasp.ckpt"), "--critic-ckpt", str(ck / "critic.ckpt"),
               "--steps", "2", "--out", str(ck)) == cli.EXIT_OK
    assert (ck / "push.ckpt").is_file()
