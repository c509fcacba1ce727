import json

import numpy as np
import pytest

from bdcl import checkpoint
from bdcl.checkpoint import CheckpointError
from bdcl.config import DEFAULTS, ConfigError, from_dict, load_config, schema_help
from bdcl.core import seeded_rng
from bdcl.model import GROUPS, freeze_for_stage2, init_params


def params(seed=0):
    return init_params(seeded_rng(seed), (5, 4, 3), 6, 3)


# ---------------------------------------------------------------- checkpoint

@pytest.mark.parametrize("suffix", [".ckpt", ".json"])
def test_round_trip_is_bit_exact(tmp_path, suffix):
    p = freeze_for_stage2(params(1))
    path = tmp_path / f"m{suffix}"
    checkpoint.save(path, p)
    q = checkpoint.load(path)
    assert q.fingerprint() == p.fingerprint()
    assert q.trainable_groups() == p.trainable_groups()
    assert (q.feature_dims, q.prior_dims, q.latent_dim, q.num_classes) == \
           (p.feature_dims, p.prior_dims, p.latent_dim, p.num_classes)
    for g in GROUPS:
        for k, a in p[g].items():
            assert q[g][k].tobytes() == a.tobytes() and q[g][k].shape == a.shape


def test_serialisation_is_deterministic():
    assert checkpoint.to_bytes(params(2)) == checkpoint.to_bytes(params(2))
    assert checkpoint.to_json(params(2)) == checkpoint.to_json(params(2))


def test_json_holds_exact_floats():
    p = params(3)
    p["classifier"]["b"][0] = 0.1 + 0.2
    q = checkpoint.from_json(checkpoint.to_json(p))
    assert q["classifier"]["b"][0] == 0.1 + 0.2


def test_corrupt_checkpoints(tmp_path):
    blob = checkpoint.to_bytes(params())
    with pytest.raises(CheckpointError):
        checkpoint.from_bytes(b"NOTACKPT" + blob[8:])
    with pytest.raises(CheckpointError):
        checkpoint.from_bytes(blob[:-8])
    doc = json.loads(checkpoint.to_json(params()))
    doc["version"] = 99
    with pytest.raises(CheckpointError):
        checkpoint.from_json(json.dumps(doc))
    (tmp_path / "x.ckpt").write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        checkpoint.load(tmp_path / "x.ckpt")


# ---------------------------------------------------------------- config

def test_defaults_and_partial_override():
    cfg = from_dict({"seed": 4, "train": {"epochs": 3}})
    assert cfg.seed == 4
    assert cfg.section("train")["epochs"] == 3
    assert cfg.section("train")["lr"] == DEFAULTS["train"]["lr"]
    t = cfg.train()
    assert t.epochs == 3 and t.seed == 4 and t.loss.tau == 0.1 and t.loss.anchor == "include"
    s = cfg.synth()
    assert s.counts == tuple(DEFAULTS["data"]["counts"]) and s.seed == 4


@pytest.mark.parametrize("doc", [
    {"train": {"epoch": 3}},
    {"data": {"sigma": 0}},
    {"train": {"theta": 1.5}},
    {"priors": {"r_policy": "random"}},
    {"seed": -1},
    {"data": {"counts": [10, 10], "test_counts": [5]}},
    {"profile": {"base_counts": [1, 2], "pool_counts": [3]}},
    {"data": {"counts": [1]}},
])
def test_invalid_configs(doc):
    with pytest.raises(ConfigError):
        from_dict(doc)


def test_fingerprint_ignores_seed_only():
    a = from_dict({"seed": 1})
    assert a.fingerprint() == from_dict({"seed": 2}).fingerprint()
    assert a.fingerprint() != from_dict({"train": {"epochs": 2}}).fingerprint()
    assert a.with_seed(9).seed == 9 and a.with_seed(None) is a


def test_load_config_sources(tmp_path, monkeypatch):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"model": {"latent_dim": 4}}))
    assert load_config(path).section("model")["latent_dim"] == 4
    monkeypatch.setenv("BDCL_CONFIG", str(path))
    assert load_config().section("model")["latent_dim"] == 4
    monkeypatch.delenv("BDCL_CONFIG")
    assert load_config().section("model")["latent_dim"] == DEFAULTS["model"]["latent_dim"]
    with pytest.raises(ConfigError, match="nope.json"):
        load_config(tmp_path / "nope.json")
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)


def test_schema_help_is_json():
    doc = json.loads(schema_help())
    assert set(doc["properties"]) == set(DEFAULTS)
    np.testing.assert_equal(doc["additionalProperties"], False)
