import json

import pytest

from bdcl import checkpoint, cli
from bdcl.cli import cli_main

SMALL = {
    "data": {"counts": [20, 12, 8], "dims": [4, 4, 4], "unlabeled_fraction": 0.2},
    "model": {"latent_dim": 6},
    "train": {"epochs": 2, "stage2_epochs": 2, "batch_size": 16, "pseudo_start_epoch": 1},
    "compare": {"sweep": [[20, 8, 4]], "seeds": 2, "test_scale": 1},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def run(*argv):
    return cli_main([str(a) for a in argv])


def pipeline(out, config, seed=3):
    assert run("gen-data", "--config", config, "--seed", seed, "--out", out) == 0
    assert run("gen-priors", "--config", config, "--seed", seed, "--out", out,
               "--data", out / "train.jsonl") == 0
    assert run("train", "--config", config, "--seed", seed, "--out", out,
               "--data", out / "train.jsonl") == 0
    assert run("tune", "--config", config, "--seed", seed, "--out", out,
               "--data", out / "train.jsonl", "--checkpoint", out / "stage1.ckpt",
               "--priors", out / "train.priors.jsonl") == 0
    assert run("eval", "--config", config, "--seed", seed, "--out", out,
               "--data", out / "test.jsonl", "--checkpoint", out / "stage1.ckpt") == 0


def test_pipeline_artifacts(tmp_path, config):
    out = tmp_path / "a"
    pipeline(out, config)
    report = json.loads((out / "report.json").read_text())
    assert report["seed"] == 3 and report["path"] == "stage1"
    assert len(report["confusion"]) == 3
    hist = [json.loads(line) for line in (out / "stage1_history.jsonl").read_text().splitlines()]
    assert [h["epoch"] for h in hist] == [1, 2]
    frozen = ("projectors", "fusion", "classifier")
    s1, s2 = checkpoint.load(out / "stage1.ckpt"), checkpoint.load(out / "stage2.ckpt")
    assert all(s1.group_checksum(g) == s2.group_checksum(g) for g in frozen)


def test_eval_with_priors_and_json_checkpoints(tmp_path, config):
    out = tmp_path / "b"
    assert run("gen-data", "--config", config, "--out", out) == 0
    assert run("gen-priors", "--config", config, "--out", out, "--data", out / "test.jsonl",
               "--name", "test.priors.jsonl") == 0
    assert run("train", "--config", config, "--out", out, "--checkpoint-format", "json",
               "--epoch-checkpoints") == 0
    assert (out / "stage1.json").exists()
    assert sorted(p.name for p in (out / "epochs").iterdir()) == \
        ["stage1-epoch001.json", "stage1-epoch002.json"]
    assert run("eval", "--config", config, "--out", out, "--data", out / "test.jsonl",
               "--checkpoint", out / "stage1.json", "--priors", out / "test.priors.jsonl",
               "--name", "with_priors.json") == 0
    assert json.loads((out / "with_priors.json").read_text())["path"] == "stage2"


def test_pipeline_is_byte_identical(tmp_path, config):
    pipeline(tmp_path / "a", config)
    pipeline(tmp_path / "b", config)
    for name in ("train.jsonl", "test.jsonl", "train.priors.jsonl", "stage1.ckpt",
                 "stage2.ckpt", "stage1_history.jsonl", "stage2_history.jsonl", "report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_gradcheck_command(tmp_path):
    assert run("gradcheck", "--seed", 7, "--instances", 2, "--out", tmp_path) == 0
    report = json.loads((tmp_path / "gradcheck.json").read_text())
    assert report["passed"] and report["max_rel_error"] < 1e-6


def test_profile_and_compare_commands(tmp_path, config):
    assert run("profile-sample", "--out", tmp_path) == 0
    prof = json.loads((tmp_path / "profile.json").read_text())
    assert 5022 <= prof["total"] <= 5024
    assert run("compare-losses", "--config", config, "--out", tmp_path) == 0
    cmp = json.loads((tmp_path / "compare_losses.json").read_text())
    assert cmp["summary"][0]["seeds"] == 2 and "pca" in cmp


def test_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "absent.json"
    assert run("gen-data", "--config", missing, "--out", tmp_path) == 1
    assert str(missing) in capsys.readouterr().err


def test_usage_errors_print_schema(tmp_path, capsys):
    assert run("frobnicate") == 1
    assert '"additionalProperties"' in capsys.readouterr().err
    assert run("gen-priors", "--out", tmp_path) == 1
    assert run("train", "--seed", -1, "--out", tmp_path) == 1


def test_invalid_config_exits_one(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"lr": -1}}))
    assert run("train", "--config", bad, "--out", tmp_path) == 1


def test_bad_input_file_exits_one(tmp_path):
    (tmp_path / "f.jsonl").write_text('{"format": "nope"}\n')
    assert run("train", "--data", tmp_path / "f.jsonl", "--out", tmp_path) == 1


def test_internal_error_exits_two(tmp_path, monkeypatch):
    def boom(args, cfg):
        raise RuntimeError("unexpected")
    monkeypatch.setitem(cli.COMMANDS, "gen-data", (boom, ""))
    assert run("gen-data", "--out", tmp_path) == 2
