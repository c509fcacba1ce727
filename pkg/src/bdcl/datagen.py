"""Synthetic multimodal datasets, imbalance sampling profiles, synthetic
priors and the feature-file format."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .core import (
    UNLABELED,
    BDCLError,
    DimMismatch,
    FeatureDataset,
    HiddenLabels,
    Labeled,
    PseudoLabeled,
    Unlabeled,
    derive_rng,
    seeded_rng,
)
from .priors import (
    PriorRecord,
    RPolicy,
    SampleMeta,
    StubTraceProvider,
    load_au_table,
    load_lexicons,
)

FEATURE_FORMAT = "bdcl-features"
FEATURE_VERSION = 1


class InvalidConfig(BDCLError):
    pass


class PoolExhausted(BDCLError):
    pass


class FeatureSchemaError(BDCLError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    counts: tuple[int, ...]
    dims: tuple[int, int, int] = (16, 16, 16)
    sigma: float = 0.5
    # Probability that a modality's cluster matches the true class; one
    # value for all modalities or one per modality (visual, audio, text).
    rho: float | tuple[float, float, float] = 1.0
    unlabeled_fraction: float = 0.0
    seed: int = 0
    center_scale: float = 1.0

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    @property
    def rho_per_modality(self) -> tuple[float, float, float]:
        if isinstance(self.rho, (int, float)):
            return (float(self.rho),) * 3
        return tuple(float(r) for r in self.rho)

    def validate(self) -> None:
        if len(self.counts) < 1 or any(n < 0 for n in self.counts) or sum(self.counts) < 2:
            raise InvalidConfig("class counts must be non-negative and total at least 2")
        if not self.sigma > 0:
            raise InvalidConfig("sigma must be positive")
        if len(self.dims) != 3 or any(d < 2 for d in self.dims):
            raise InvalidConfig("three modality dims, each at least 2, are required")
        rho = self.rho_per_modality
        if len(rho) != 3 or any(not 0.0 <= r <= 1.0 for r in rho):
            raise InvalidConfig("rho must lie in [0, 1]")
        if not 0.0 <= self.unlabeled_fraction < 1.0:
            raise InvalidConfig("unlabeled fraction must lie in [0, 1)")
        if self.num_classes == 1 and min(rho) < 1.0:
            raise InvalidConfig("a single-class dataset cannot have rho < 1")


def largest_remainder(total: int, weights: Sequence[float]) -> np.ndarray:
    """Integer split of ``total`` proportional to ``weights`` (Hamilton method).

    Ties in the fractional part go to the lower index.
    """
    w = np.asarray(weights, dtype=np.float64)
    if total == 0 or w.sum() == 0:
        return np.zeros(len(w), dtype=np.int64)
    exact = total * w / w.sum()
    base = np.floor(exact).astype(np.int64)
    short = total - int(base.sum())
    order = sorted(range(len(w)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:short]:
        base[i] += 1
    return base


def synth_dataset(cfg: SynthConfig, draw: int = 0, holdout: bool = False) -> FeatureDataset:
    """Gaussian clusters per (class, modality) with cross-modal inconsistency.

    A sample of class c draws each modality from c's cluster with
    probability rho_m, otherwise from a uniformly chosen other class.
    Cluster centres depend only on ``cfg.seed``; ``draw`` selects an
    independent sample from the same clusters. A ``holdout`` draw is fully
    unlabeled with its classes kept as hidden labels (an evaluation set).
    """
    cfg.validate()
    c_count = cfg.num_classes
    center_rng = derive_rng(cfg.seed, 0)
    centers = [center_rng.normal(size=(c_count, d)) * cfg.center_scale for d in cfg.dims]
    rng = derive_rng(cfg.seed, 1 + draw)
    y = np.repeat(np.arange(c_count), cfg.counts)
    n = len(y)
    feats = []
    for m, d in enumerate(cfg.dims):
        src = y.copy()
        flip = rng.random(n) >= cfg.rho_per_modality[m]
        if c_count > 1:
            offset = rng.integers(1, c_count, size=n)
            src = np.where(flip, (y + offset) % c_count, y)
        feats.append(centers[m][src] + cfg.sigma * rng.normal(size=(n, d)))
    perm = rng.permutation(n)
    y = y[perm]
    feats = [x[perm] for x in feats]
    prefix = "t" if holdout else "s"
    ids = tuple(f"{prefix}{draw}-{i:05d}" if draw else f"{prefix}{i:05d}" for i in range(n))
    if holdout:
        hidden = HiddenLabels({sid: int(c) for sid, c in zip(ids, y)})
        return FeatureDataset(ids, tuple(feats), (UNLABELED,) * n, c_count, hidden)

    n_unlab = math.floor(cfg.unlabeled_fraction * n + 0.5)
    per_class = largest_remainder(n_unlab, np.bincount(y, minlength=c_count))
    unlabeled = set()
    for c in range(c_count):
        members = np.flatnonzero(y == c)
        unlabeled.update(int(i) for i in rng.choice(members, size=per_class[c], replace=False))
    labels = tuple(UNLABELED if i in unlabeled else Labeled(int(y[i])) for i in range(n))
    hidden = HiddenLabels({ids[i]: int(y[i]) for i in sorted(unlabeled)})
    return FeatureDataset(ids, tuple(feats), labels, c_count, hidden)


def split_dataset(ds: FeatureDataset, test_fraction: float, seed: int
                  ) -> tuple[FeatureDataset, FeatureDataset]:
    """Class-stratified train/test split.

    Test samples become unlabeled; their classes move to hidden labels.
    """
    if not 0.0 < test_fraction < 1.0:
        raise InvalidConfig("test fraction must lie in (0, 1)")
    rng = seeded_rng(seed)
    truth = ds.truth()
    test = []
    for c in range(ds.num_classes):
        members = np.flatnonzero(truth == c)
        k = math.floor(test_fraction * len(members) + 0.5)
        test.extend(int(i) for i in rng.choice(members, size=k, replace=False))
    test_set = set(test)
    train_idx = [i for i in range(len(ds)) if i not in test_set]
    test_idx = sorted(test_set)
    train = ds.subset(train_idx)
    held = ds.subset(test_idx)
    hidden = {sid: int(truth[i]) for sid, i in zip(held.ids, test_idx)}
    held = FeatureDataset(held.ids, held.features, (UNLABELED,) * len(held), ds.num_classes,
                          HiddenLabels(hidden))
    return train, held


def imbalance_profile(kind: Literal["random", "matched", "balanced"], base_counts, extra: int,
                      pool_counts, seed: int = 0) -> np.ndarray:
    """Per-class numbers of samples to add from a pool.

    random: draw ``extra`` pool items uniformly without replacement.
    matched: split ``extra`` in proportion to ``base_counts``.
    balanced: add one at a time to the currently smallest class; refuses
    (PoolExhausted) when a short pool would leave the class ratio worse.
    """
    base = np.asarray(base_counts, dtype=np.int64)
    pool = np.asarray(pool_counts, dtype=np.int64)
    if extra < 0:
        raise ValueError("extra must be non-negative")
    if base.shape != pool.shape:
        raise ValueError("base and pool counts need one entry per class")
    if extra > pool.sum():
        raise PoolExhausted(f"pool holds {int(pool.sum())} samples, {extra} requested")
    if kind == "random":
        return seeded_rng(seed).multivariate_hypergeometric(pool, extra).astype(np.int64)
    if kind == "matched":
        added = largest_remainder(extra, base)
        short = np.flatnonzero(added > pool)
        if len(short):
            raise PoolExhausted(f"pool too small for classes {short.tolist()}")
        return added
    if kind == "balanced":
        added = np.zeros_like(base)
        for _ in range(extra):
            room = added < pool
            totals = np.where(room, base + added, np.iinfo(np.int64).max)
            added[int(np.argmin(totals))] += 1
        after = base + added
        # Compare max/min ratios by cross-multiplication to stay exact. A
        # worse ratio with every pool still open is only the one-sample
        # rounding of an already equal base.
        worse = base.min() > 0 and after.max() * base.min() > base.max() * after.min()
        dry = (added == pool) & (after < after.max())
        if worse and dry.any():
            raise PoolExhausted("pool of the smallest classes is too small to place "
                                f"{extra} samples without worsening the class ratio")
        return added
    raise ValueError(f"unknown profile {kind!r}")


def synth_priors(ds: FeatureDataset, fidelity: float, r_policy: RPolicy = "uniform",
                 seed: int = 0, table=None, lexicons=None, include_hidden: bool = True,
                 aggregation="weighted_sum") -> list[PriorRecord]:
    """One stub reasoning trace per sample whose true class is known.

    Hidden labels of unlabeled samples are used when ``include_hidden``;
    this stands in for an external model that sees the raw clip.
    """
    if not 0.0 <= fidelity <= 1.0:
        raise InvalidConfig("fidelity must lie in [0, 1]")
    table = (table or load_au_table()).restrict(ds.num_classes)
    lexicons = (lexicons or load_lexicons(names=table.names)).restrict(ds.num_classes)
    provider = StubTraceProvider(fidelity, table, lexicons, r_policy, seed, aggregation)
    truth = ds.truth()
    out = []
    for sid, state, y in zip(ds.ids, ds.labels, truth):
        if y < 0 or (not include_hidden and not isinstance(state, Labeled)):
            continue
        out.append(provider.request(SampleMeta(sid, int(y))))
    return out


# ---------------------------------------------------------------- feature files

def _label_json(state):
    if isinstance(state, Labeled):
        return state.cls
    return None


def save_features(path, ds: FeatureDataset) -> None:
    """Header line, then one JSON object per sample; floats use repr precision."""
    header = {
        "format": FEATURE_FORMAT,
        "version": FEATURE_VERSION,
        "count": len(ds),
        "dims": list(ds.dims),
        "num_classes": ds.num_classes,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for i, sid in enumerate(ds.ids):
            state = ds.labels[i]
            row = {"id": sid, "label": _label_json(state)}
            if isinstance(state, PseudoLabeled):
                row["pseudo"] = [state.cls, state.confidence]
            hidden = ds.hidden.reveal(sid)
            if hidden is not None:
                row["truth"] = hidden
            for key, x in zip(("visual", "audio", "text"), ds.features):
                row[key] = x[i].tolist()
            fh.write(json.dumps(row) + "\n")


def load_features(path) -> FeatureDataset:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise FeatureSchemaError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FeatureSchemaError(f"{path}: bad header ({exc})") from exc
    if header.get("format") != FEATURE_FORMAT or header.get("version") != FEATURE_VERSION:
        raise FeatureSchemaError(f"{path}: not a {FEATURE_FORMAT} v{FEATURE_VERSION} file")
    try:
        dims = tuple(int(d) for d in header["dims"])
        num_classes = int(header["num_classes"])
        count = int(header["count"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FeatureSchemaError(f"{path}: incomplete header ({exc})") from exc
    if len(dims) != 3:
        raise FeatureSchemaError(f"{path}: header needs three modality dims")
    ids, labels, hidden = [], [], {}
    feats = [[], [], []]
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FeatureSchemaError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
        sid = row.get("id")
        for m, key in enumerate(("visual", "audio", "text")):
            if key not in row:
                raise FeatureSchemaError(f"{path}:{lineno}: row {sid!r} is missing the {key} features")
            vec = row[key]
            if len(vec) != dims[m]:
                raise DimMismatch(f"{path}:{lineno}: row {sid!r} {key} has {len(vec)} values, header says {dims[m]}")
            feats[m].append(vec)
        if "id" not in row or "label" not in row:
            raise FeatureSchemaError(f"{path}:{lineno}: row needs 'id' and 'label'")
        ids.append(str(sid))
        if "pseudo" in row:
            labels.append(PseudoLabeled(int(row["pseudo"][0]), float(row["pseudo"][1])))
        elif row["label"] is None:
            labels.append(UNLABELED)
        else:
            labels.append(Labeled(int(row["label"])))
        if "truth" in row:
            hidden[str(sid)] = int(row["truth"])
    if len(ids) != count:
        raise FeatureSchemaError(f"{path}: header count {count} but {len(ids)} rows")
    arrays = tuple(np.array(f, dtype=np.float64).reshape(len(ids), dims[m]) for m, f in enumerate(feats))
    return FeatureDataset(tuple(ids), arrays, tuple(labels), num_classes, HiddenLabels(hidden))


def drop_unlabeled(ds: FeatureDataset) -> FeatureDataset:
    return ds.subset([i for i, s in enumerate(ds.labels) if not isinstance(s, Unlabeled)])
