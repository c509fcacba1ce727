"""Experiment configuration: one JSON document covering every module.

Every section and key is optional; missing values take the defaults below.
Unknown keys are rejected so that typos cannot silently fall back to a
default. ``SCHEMA`` is the authoritative description and is printed by the
CLI on validation errors.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .core import BDCLError
from .datagen import SynthConfig
from .losses import LossConfig
from .trainer import TrainConfig

ENV_VAR = "BDCL_CONFIG"


class ConfigError(BDCLError):
    pass


def _num(minimum=None, exclusive=None, maximum=None):
    s = {"type": "number"}
    if minimum is not None:
        s["minimum"] = minimum
    if exclusive is not None:
        s["exclusiveMinimum"] = exclusive
    if maximum is not None:
        s["maximum"] = maximum
    return s


def _int(minimum=0):
    return {"type": "integer", "minimum": minimum}


_COUNTS = {"type": "array", "items": _int(0), "minItems": 1}
_RHO = {"oneOf": [_num(0, maximum=1),
                  {"type": "array", "items": _num(0, maximum=1), "minItems": 3, "maxItems": 3}]}


def _section(props):
    return {"type": "object", "additionalProperties": False, "properties": props}


SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "bdcl experiment config",
    **_section({
        "seed": _int(0),
        "data": _section({
            "counts": _COUNTS,
            "test_counts": _COUNTS,
            "dims": {"type": "array", "items": _int(2), "minItems": 3, "maxItems": 3},
            "sigma": _num(exclusive=0),
            "rho": _RHO,
            "unlabeled_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "center_scale": _num(exclusive=0),
        }),
        "priors": _section({
            "fidelity": _num(0, maximum=1),
            "r_policy": {"enum": ["uniform", "dirichlet", "one-hot"]},
            "aggregation": {"enum": ["weighted_sum", "max"]},
            "include_hidden": {"type": "boolean"},
        }),
        "model": _section({"latent_dim": _int(1)}),
        "train": _section({
            "lambda_inter": _num(0),
            "lambda_intra": _num(0),
            "tau": _num(exclusive=0),
            "anchor": {"enum": ["include", "exclude"]},
            "denominator": {"enum": ["balanced", "uniform"]},
            "lr": _num(exclusive=0),
            "epochs": _int(0),
            "stage2_epochs": _int(0),
            "stage2_lr": _num(exclusive=0),
            "batch_size": _int(2),
            "theta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "pseudo_start_epoch": _int(0),
            "lambda_ce": _num(0),
            "stage2_loss": {"enum": ["ce", "ce+bdcl"]},
            "warm_start": {"type": "boolean"},
        }),
        "compare": _section({
            "sweep": {"type": "array", "items": _COUNTS, "minItems": 1},
            "seeds": _int(1),
            "test_scale": _int(1),
        }),
        "profile": _section({
            "kind": {"enum": ["random", "matched", "balanced"]},
            "base_counts": _COUNTS,
            "extra": _int(0),
            "pool_counts": _COUNTS,
        }),
    }),
}

DEFAULTS = {
    "seed": 0,
    "data": {"counts": [120, 60, 30], "test_counts": None, "dims": [16, 16, 16], "sigma": 0.5,
             "rho": 0.85, "unlabeled_fraction": 0.0, "center_scale": 1.0},
    "priors": {"fidelity": 1.0, "r_policy": "uniform", "aggregation": "weighted_sum",
               "include_hidden": True},
    "model": {"latent_dim": 16},
    "train": {"lambda_inter": 0.2, "lambda_intra": 0.2, "tau": 0.1, "anchor": "include",
              "denominator": "balanced", "lr": 5e-3, "epochs": 30, "stage2_epochs": 20,
              "stage2_lr": 5e-3, "batch_size": 32, "theta": 0.8, "pseudo_start_epoch": 5,
              "lambda_ce": 1.0, "stage2_loss": "ce", "warm_start": True},
    "compare": {"sweep": [[200, 40, 10]], "seeds": 5, "test_scale": 10},
    "profile": {"kind": "matched", "base_counts": [1150, 980, 760, 580, 370, 184],
                "extra": 1000, "pool_counts": None},
}


@dataclass(frozen=True)
class Config:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    def with_seed(self, seed: int | None) -> "Config":
        if seed is None:
            return self
        raw = copy.deepcopy(self.raw)
        raw["seed"] = seed
        return Config(raw)

    def section(self, name: str) -> dict:
        return self.raw[name]

    def fingerprint(self) -> str:
        """sha256 of the resolved config without its seed; the seed is
        reported on its own, so seed sweeps share one fingerprint."""
        body = {k: v for k, v in self.raw.items() if k != "seed"}
        canon = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def synth(self, counts=None) -> SynthConfig:
        d = self.raw["data"]
        rho = d["rho"] if isinstance(d["rho"], (int, float)) else tuple(d["rho"])
        return SynthConfig(counts=tuple(counts or d["counts"]), dims=tuple(d["dims"]),
                           sigma=d["sigma"], rho=rho, unlabeled_fraction=d["unlabeled_fraction"],
                           seed=self.seed, center_scale=d["center_scale"])

    def train(self) -> TrainConfig:
        t = dict(self.raw["train"])
        loss = LossConfig(*(t.pop(k) for k in ("lambda_inter", "lambda_intra", "tau", "anchor")))
        return TrainConfig(loss=loss, seed=self.seed, **t)

    def to_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, indent=2)


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k].update(v)
        else:
            out[k] = v
    return out


def from_dict(doc: dict) -> Config:
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {e.message}") from e
    cfg = Config(_merge(DEFAULTS, doc))
    data, prof = cfg.raw["data"], cfg.raw["profile"]
    if data["test_counts"] is not None and len(data["test_counts"]) != len(data["counts"]):
        raise ConfigError("config invalid: data.test_counts must have one entry per class")
    if prof["pool_counts"] is not None and len(prof["pool_counts"]) != len(prof["base_counts"]):
        raise ConfigError("config invalid: profile.pool_counts must have one entry per class")
    try:
        cfg.synth().validate()
        cfg.train()
    except (ValueError, BDCLError) as e:
        raise ConfigError(f"config invalid: {e}") from e
    return cfg


def load_config(path=None) -> Config:
    """Read ``path``, else the file named by $BDCL_CONFIG, else defaults."""
    path = path or os.environ.get(ENV_VAR)
    if not path:
        return Config()
    p = Path(path)
    try:
        text = p.read_text()
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {p}") from e
    except OSError as e:
        raise ConfigError(f"cannot read config file {p}: {e}") from e
    try:
        doc = json.loads(text)
    except ValueError as e:
        raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
    return from_dict(doc)


def schema_help() -> str:
    return json.dumps(SCHEMA, indent=2)
